#!/usr/bin/env python3
"""Offline trainer for the committed toy checkpoints.

Trains a small MLP and a small conv net on the 8x8 digits set, quantizes the
weights to 8-bit two's complement with a symmetric per-layer scale
(max|w| / 127), and writes:

  crates/core/data/mlp.qnn
  crates/core/data/cnn.qnn
  crates/core/data/digits_test.csv

The simulator never trains; rerun this only to regenerate the data files.
Checkpoint layout is documented in docs/FORMATS.md.
"""
import struct
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

SEED = 20240611
OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"

ACT = {"identity": 0, "relu": 1, "tanh": 2}


def quantize(w):
    scale = float(np.abs(w).max()) / 127.0
    codes = np.clip(np.round(w / scale), -127, 127).astype(np.int8)
    return codes, scale


def write_checkpoint(path, layers, num_classes, input_len):
    buf = bytearray()
    buf += b"QNNM"
    buf += struct.pack("<HHII", 1, len(layers), num_classes, input_len)
    for layer in layers:
        if layer["kind"] == "dense":
            buf += struct.pack("<BB", 0, ACT[layer["act"]])
            buf += struct.pack("<II", layer["in"], layer["out"])
        else:
            buf += struct.pack("<BB", 1, ACT[layer["act"]])
            buf += struct.pack(
                "<IIIII",
                layer["in_ch"],
                layer["out_ch"],
                layer["k"],
                layer["in_h"],
                layer["in_w"],
            )
        buf += struct.pack("<d", layer["scale"])
        codes = layer["codes"].reshape(-1)
        buf += struct.pack("<I", codes.size)
        buf += codes.tobytes()
        bias = np.asarray(layer["bias"], dtype="<f8").reshape(-1)
        buf += struct.pack("<I", bias.size)
        buf += bias.tobytes()
    path.write_bytes(bytes(buf))


def forward_np(layers, x):
    h = x
    for layer in layers:
        w = layer["codes"].astype(np.float64) * layer["scale"]
        if layer["kind"] == "dense":
            h = h @ w.T + layer["bias"]
        else:
            n = h.shape[0]
            img = h.reshape(n, layer["in_ch"], layer["in_h"], layer["in_w"])
            k = layer["k"]
            oh, ow = layer["in_h"] - k + 1, layer["in_w"] - k + 1
            out = np.zeros((n, layer["out_ch"], oh, ow))
            for i in range(oh):
                for j in range(ow):
                    patch = img[:, :, i : i + k, j : j + k].reshape(n, -1)
                    out[:, :, i, j] = patch @ w.reshape(layer["out_ch"], -1).T
            out += np.asarray(layer["bias"]).reshape(1, -1, 1, 1)
            h = out.reshape(n, -1)
        if layer["act"] == "relu":
            h = np.maximum(h, 0.0)
    return h


def train(model, xtr, ytr, epochs=400):
    # dropout plus weight decay keep random single-bit faults from dominating
    opt = torch.optim.Adam(model.parameters(), lr=0.01, weight_decay=1e-4)
    xt = torch.tensor(xtr, dtype=torch.float32)
    yt = torch.tensor(ytr, dtype=torch.long)
    model.train()
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(model(xt), yt)
        loss.backward()
        opt.step()
    model.eval()
    return model


def main():
    torch.manual_seed(SEED)
    digits = load_digits()
    x = digits.data.astype(np.float64) / 16.0
    y = digits.target.astype(np.int64)
    xtr, xte, ytr, yte = train_test_split(
        x, y, test_size=500, random_state=SEED, stratify=y
    )

    mlp = torch.nn.Sequential(
        torch.nn.Linear(64, 64),
        torch.nn.ReLU(),
        torch.nn.Dropout(0.2),
        torch.nn.Linear(64, 10),
    )
    train(mlp, xtr, ytr)
    mlp_layers = []
    for lin, act in ((mlp[0], "relu"), (mlp[3], "identity")):
        codes, scale = quantize(lin.weight.detach().double().numpy())
        mlp_layers.append(
            dict(
                kind="dense",
                act=act,
                **{"in": lin.in_features, "out": lin.out_features},
                codes=codes,
                scale=scale,
                bias=lin.bias.detach().double().numpy(),
            )
        )

    class Cnn(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.conv = torch.nn.Conv2d(1, 8, 3)
            self.drop = torch.nn.Dropout(0.2)
            self.fc = torch.nn.Linear(8 * 6 * 6, 10)

        def forward(self, v):
            h = torch.relu(self.conv(v.view(-1, 1, 8, 8)))
            return self.fc(self.drop(h.reshape(v.shape[0], -1)))

    cnn = train(Cnn(), xtr, ytr, epochs=300)
    c_codes, c_scale = quantize(cnn.conv.weight.detach().double().numpy())
    f_codes, f_scale = quantize(cnn.fc.weight.detach().double().numpy())
    cnn_layers = [
        dict(kind="conv", act="relu", in_ch=1, out_ch=8, k=3, in_h=8, in_w=8,
             codes=c_codes, scale=c_scale, bias=cnn.conv.bias.detach().double().numpy()),
        dict(kind="dense", act="identity", **{"in": 288, "out": 10},
             codes=f_codes, scale=f_scale, bias=cnn.fc.bias.detach().double().numpy()),
    ]

    OUT.mkdir(parents=True, exist_ok=True)
    for name, layers in (("mlp", mlp_layers), ("cnn", cnn_layers)):
        acc = (forward_np(layers, xte).argmax(1) == yte).mean()
        print(f"{name}: quantized test accuracy {acc:.4f}")
        write_checkpoint(OUT / f"{name}.qnn", layers, 10, 64)

    with open(OUT / "digits_test.csv", "w", newline="\n") as f:
        f.write("label," + ",".join(f"p{i}" for i in range(64)) + "\n")
        for row, label in zip(digits.data[_test_index(x, xte)], yte):
            f.write(str(label) + "," + ",".join(str(int(v)) for v in row) + "\n")


def _test_index(x, xte):
    # recover the original integer pixels for the held-out split
    lookup = {x[i].tobytes(): i for i in range(len(x))}
    return [lookup[r.tobytes()] for r in xte]


if __name__ == "__main__":
    main()
