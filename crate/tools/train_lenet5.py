"""Train the LeNet-5 fixture used by the inference tests.

Writes `manifest.json` + `lenet5.bin` (little-endian f32, row-major) into the
output directory.

Two forward passes share the weights and both go into the loss:

* a float pass, the same computation as the reference engine;
* an exact model of the 8-bit datapath (Q8.4, 5 MAC iterations): inputs and
  activations truncated to 1/16, products formed by shift-and-add with
  truncating shifts, outputs saturated to [-8, 8). Gradients pass straight
  through to the float product.

The stored weights are the float weights. The datapath truncates each one to
1/16 and runs 5 rotation steps, which lands on an odd multiple of 1/16 (or
skips the product when the truncated weight is 0); the exact pass does the same.

    python3 tools/train_lenet5.py --mnist /path/to/idx --out crates/core/fixtures/lenet5
"""
import argparse
import copy
import json
import math
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FRAC = 4
ONE = 2**FRAC
ITERS = 5
RAW_LO, RAW_HI = -128, 127
W_MAX = 31  # largest odd raw weight below 2


def read_idx(path):
    with open(path, "rb") as f:
        data = f.read()
    magic = struct.unpack(">I", data[:4])[0]
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, data[4 : 4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def deltas(w_raw):
    """Rotation directions of a linear CORDIC over shifts 0..ITERS-1; zero weights are skipped."""
    z = w_raw.clone()
    out = []
    for j in range(ITERS):
        d = torch.where(z >= 0, 1.0, -1.0)
        z = z - d * (ONE >> j)
        out.append(d * (w_raw != 0))
    return out


def effective(w):
    """The weight the datapath multiplies by: truncate to 1/16, then 5 rotation steps."""
    w_raw = torch.floor(w * ONE)
    return sum(d * (ONE >> j) for j, d in enumerate(deltas(w_raw))) / ONE


def cordic_layer(x, w, b, op):
    """Exact shift-and-add MAC on raw Q8.4 operands, saturated, with a float gradient."""
    x_raw = torch.floor(x.detach() * ONE)
    w_raw = torch.floor(w.detach() * ONE)
    acc = torch.floor(b.detach() * ONE).clamp(RAW_LO, RAW_HI)
    acc = acc.view(1, -1, *([1] * (x.dim() - 2)))
    for j, d in enumerate(deltas(w_raw)):
        acc = acc + op(torch.floor(x_raw / 2**j), d)
    exact = acc.clamp(RAW_LO, RAW_HI) / ONE
    # no gradient through outputs the datapath saturated
    smooth = (op(x, w) + b.view(1, -1, *([1] * (x.dim() - 2)))).clamp(RAW_LO / ONE, RAW_HI / ONE)
    return smooth + (exact - smooth).detach()


def pruned(w, frac):
    """Zero the smallest-magnitude fraction of w, lower index first on ties."""
    if frac == 0:
        return w
    flat = w.detach().abs().flatten()
    cut = len(flat) - math.ceil((1 - frac) * len(flat))
    mask = torch.ones_like(flat)
    mask[torch.argsort(flat, stable=True)[:cut]] = 0
    return w * mask.view_as(w)


class LeNet5(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(400, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 10)

    def layers(self):
        return [self.conv1, self.conv2, self.fc1, self.fc2, self.fc3]

    def forward(self, x, exact, prune=0.0):
        if exact:
            x = torch.floor(x * ONE) / ONE
            layer = lambda x, m, op: cordic_layer(x, pruned(m.weight, prune), m.bias, op)
        else:
            layer = lambda x, m, op: op(x, pruned(m.weight, prune)) + m.bias.view(1, -1, *([1] * (x.dim() - 2)))
        conv1 = lambda x, w: F.conv2d(x, w, padding=2)
        x = F.max_pool2d(F.relu(layer(x, self.conv1, conv1)), 2)
        x = F.max_pool2d(F.relu(layer(x, self.conv2, F.conv2d)), 2).flatten(1)
        x = F.relu(layer(x, self.fc1, F.linear))
        x = F.relu(layer(x, self.fc2, F.linear))
        return layer(x, self.fc3, F.linear)


def accuracy(model, x, y, exact, prune=0.0):
    with torch.no_grad():
        return sum((model(x[i : i + 1000], exact, prune).argmax(1) == y[i : i + 1000]).sum().item() for i in range(0, len(x), 1000)) / len(x)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--prune", type=float, default=0.4, help="sparsity the model should survive without retraining")
    args = ap.parse_args()
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    torch.set_num_threads(os.cpu_count() or 1)

    xtr = torch.tensor(read_idx(os.path.join(args.mnist, "train-images-idx3-ubyte")), dtype=torch.float32)[:, None] / 255.0
    ytr = torch.tensor(read_idx(os.path.join(args.mnist, "train-labels-idx1-ubyte")), dtype=torch.long)
    # the last 5000 training images pick the checkpoint; the test set is not looked at
    xva, yva = xtr[-5000:], ytr[-5000:]
    xtr, ytr = xtr[:-5000], ytr[:-5000]
    xte = torch.tensor(read_idx(os.path.join(args.mnist, "t10k-images-idx3-ubyte")), dtype=torch.float32)[:, None] / 255.0
    yte = torch.tensor(read_idx(os.path.join(args.mnist, "t10k-labels-idx1-ubyte")), dtype=torch.long)

    model = LeNet5()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.epochs)
    bs = 128
    best = (-1.0, copy.deepcopy(model.state_dict()))
    for epoch in range(args.epochs):
        model.train()
        perm = torch.randperm(len(xtr))
        for i in range(0, len(xtr), bs):
            idx = perm[i : i + bs]
            xb, yb = xtr[idx], ytr[idx]
            # half the steps see the magnitude-pruned network; the stored weights stay dense
            frac = args.prune if epoch > 0 and torch.rand(()) < 0.5 else 0.0
            loss = F.cross_entropy(model(xb, False, frac), yb)
            if epoch > 0:
                loss = loss + 2 * F.cross_entropy(model(xb, True, frac), yb)
                # pull the float weights toward what the datapath uses, harder each epoch
                pull = sum(((m.weight - effective(m.weight.detach())) * ONE).pow(2).mean() for m in model.layers())
                loss = loss + 0.05 * epoch * pull
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            opt.step()
            with torch.no_grad():
                # keeps every truncated weight inside (-2, 2), where no pre-scaling is needed
                for p in model.parameters():
                    p.clamp_(-W_MAX / ONE, 1.99)
        sched.step()
        model.eval()
        vf, ve = accuracy(model, xva, yva, False), accuracy(model, xva, yva, True)
        vp = accuracy(model, xva, yva, True, args.prune)
        print(f"epoch {epoch} val float={vf:.4f} exact={ve:.4f} exact_pruned={vp:.4f}", flush=True)
        if epoch > 0 and min(vf, ve, vp) > best[0]:
            best = (min(vf, ve, vp), copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[1])
    model.eval()
    print(f"test float={accuracy(model, xte, yte, False):.4f} exact={accuracy(model, xte, yte, True):.4f}", flush=True)

    os.makedirs(args.out, exist_ok=True)
    blob = bytearray()
    tensors = {}
    with torch.no_grad():
        for name, m in [("conv1", model.conv1), ("conv2", model.conv2), ("fc1", model.fc1), ("fc2", model.fc2), ("fc3", model.fc3)]:
            for suffix, t in (("weight", m.weight), ("bias", m.bias)):
                arr = t.numpy().astype("<f4")
                tensors[f"{name}.{suffix}"] = {"offset": len(blob), "shape": list(arr.shape)}
                blob += arr.tobytes()
    with open(os.path.join(args.out, "lenet5.bin"), "wb") as f:
        f.write(blob)

    def t(name):
        return tensors[name]

    layers = [
        {"name": "conv1", "kind": "conv", "k": 5, "cin": 1, "cout": 6, "h": 28, "w": 28, "stride": 1, "pad": 2,
         "af": "relu", "weights": t("conv1.weight"), "bias": t("conv1.bias")},
        {"name": "pool1", "kind": "pool", "k": 2, "cin": 6, "cout": 6, "h": 28, "w": 28, "stride": 2},
        {"name": "conv2", "kind": "conv", "k": 5, "cin": 6, "cout": 16, "h": 14, "w": 14, "stride": 1, "pad": 0,
         "af": "relu", "weights": t("conv2.weight"), "bias": t("conv2.bias")},
        {"name": "pool2", "kind": "pool", "k": 2, "cin": 16, "cout": 16, "h": 10, "w": 10, "stride": 2},
        {"name": "flatten", "kind": "flatten", "cin": 16, "cout": 400, "h": 5, "w": 5},
        {"name": "fc1", "kind": "fc", "cin": 400, "cout": 120, "af": "relu", "weights": t("fc1.weight"), "bias": t("fc1.bias")},
        {"name": "fc2", "kind": "fc", "cin": 120, "cout": 84, "af": "relu", "weights": t("fc2.weight"), "bias": t("fc2.bias")},
        {"name": "fc3", "kind": "fc", "cin": 84, "cout": 10, "af": "none", "weights": t("fc3.weight"), "bias": t("fc3.bias")},
    ]
    manifest = {
        "name": "lenet5-mnist",
        "blob": "lenet5.bin",
        "input_shape": [1, 28, 28],
        "quantization": {"format": "Q8.4", "rounding": "truncate"},
        "layers": layers,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
