"""Regenerate reference_step.json: one AdamW step of a B=2 cosine-logit
dual encoder, computed independently with torch in float64."""
import json
import math
from pathlib import Path

import torch

torch.set_default_dtype(torch.float64)
M, H, N = 3, 4, 3
LR = 1e-3


def val(block, k):
    return 0.5 * math.sin(1.3 * k + 0.7 * block + 0.1)


def encoder(offset):
    shapes = [("w1", (H, M)), ("b1", (H,)), ("w2", (N, H)), ("b2", (N,)),
              ("nw", (N,)), ("nb", (N,)), ("proj", (N, N))]
    params = {}
    for i, (name, shape) in enumerate(shapes):
        count = math.prod(shape)
        vals = [val(offset + i, k) for k in range(count)]
        if name == "nw":
            vals = [1.0 + v for v in vals]
        params[name] = torch.tensor(vals).reshape(shape).requires_grad_()
    return params


def forward(p, x):
    h = torch.tanh(p["w1"] @ x + p["b1"])
    o = p["w2"] @ h + p["b2"]
    xhat = (o - o.mean()) / o.var(unbiased=False).sqrt()
    return p["proj"] @ (p["nw"] * xhat + p["nb"])


text = encoder(0)
image = encoder(10)
log_beta = torch.tensor(math.log(1 / 0.07), requires_grad=True)
tf = torch.tensor([[0.3, -1.0, 2.0], [1.0, 0.2, -0.3]])
imf = torch.tensor([[0.4, -0.8, 1.7], [0.9, 0.1, -0.5]])

t = torch.stack([forward(text, x) for x in tf])
v = torch.stack([forward(image, x) for x in imf])
cos = (t / t.norm(dim=1, keepdim=True)) @ (v / v.norm(dim=1, keepdim=True)).T
logits = log_beta.exp() * cos
target = torch.arange(2)
loss = 0.5 * (torch.nn.functional.cross_entropy(logits, target)
              + torch.nn.functional.cross_entropy(logits.T, target))
loss.backward()

decay = [p[k] for p in (text, image) for k in ("w1", "w2", "proj")]
rest = [p[k] for p in (text, image) for k in ("b1", "b2", "nw", "nb")] + [log_beta]
opt = torch.optim.AdamW(
    [{"params": decay, "weight_decay": 0.01}, {"params": rest, "weight_decay": 0.0}],
    lr=LR, betas=(0.9, 0.98), eps=1e-8)
opt.step()


def dump(p):
    return [p[k].detach().flatten().tolist() for k in ("w1", "b1", "w2", "b2", "nw", "nb", "proj")]


out = {"loss": loss.item(), "text": dump(text), "image": dump(image), "log_beta": log_beta.item()}
Path(__file__).with_suffix(".json").write_text(json.dumps(out, indent=1) + "\n")
