#!/usr/bin/env python3
"""Regenerates the backbone regression fixture under crates/anoclass/tests/data.

Builds a narrow bottleneck network (same topology and layer naming as the
standard 50-layer network, stride on the 3x3 conv, batch-norm eps 1e-5) with
seeded random weights AND random batch-norm running statistics, exports it to
ANOC, runs it on a seeded input in eval mode, and freezes the stage-2/stage-3
activations plus the stage-4 global-average-pooled vector to JSON.
"""

import json
import os

import numpy as np
import torch
import torch.nn as nn

from anoc_format import module_tensors, write_archive

HERE = os.path.dirname(os.path.abspath(__file__))
OUT_DIR = os.path.join(HERE, "..", "crates", "anoclass", "tests", "data")

WIDTH = 2  # stage widths [2, 4, 8, 16], expansion 4


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu(out + identity)


class TinyResNet(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.inplanes = width
        self.conv1 = nn.Conv2d(3, width, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_layer(width, 1, stride=1)
        self.layer2 = self._make_layer(2 * width, 1, stride=2)
        self.layer3 = self._make_layer(4 * width, 1, stride=2)
        self.layer4 = self._make_layer(8 * width, 1, stride=2)

    def _make_layer(self, planes, blocks, stride):
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottleneck.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * Bottleneck.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes * Bottleneck.expansion),
            )
        layers = [Bottleneck(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes * Bottleneck.expansion
        for _ in range(1, blocks):
            layers.append(Bottleneck(self.inplanes, planes))
        return nn.Sequential(*layers)

    def forward_stages(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer1(x)
        f2 = self.layer2(x)
        f3 = self.layer3(f2)
        f4 = self.layer4(f3)
        pooled = f4.mean(dim=(2, 3))
        return f2, f3, pooled


def main():
    torch.manual_seed(1234)
    model = TinyResNet(WIDTH)
    # randomize BN running stats so the folding path is exercised
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.running_mean.normal_(0.0, 0.3)
                m.running_var.uniform_(0.5, 1.5)
                m.weight.normal_(1.0, 0.2)
                m.bias.normal_(0.0, 0.2)
    model.eval()

    descriptor = {
        "kind": "backbone",
        "arch": "bottleneck-residual",
        "id": f"fixture-w{WIDTH}",
        "stem_channels": WIDTH,
        "stage_blocks": [1, 1, 1, 1],
        "stage_channels": [WIDTH, 2 * WIDTH, 4 * WIDTH, 8 * WIDTH],
        "expansion": 4,
    }
    write_archive(os.path.join(OUT_DIR, "backbone_fixture.anoc"), descriptor, module_tensors(model))

    rng = np.random.default_rng(99)
    x = rng.normal(0.0, 1.0, size=(3, 64, 64)).astype(np.float32)
    with torch.no_grad():
        f2, f3, pooled = model.forward_stages(torch.from_numpy(x)[None])

    fixture = {
        "input_shape": [3, 64, 64],
        "input": x.ravel().tolist(),
        "f2_shape": list(f2.shape[1:]),
        "f2": f2[0].numpy().ravel().tolist(),
        "f3_shape": list(f3.shape[1:]),
        "f3": f3[0].numpy().ravel().tolist(),
        "pooled": pooled[0].numpy().tolist(),
    }
    with open(os.path.join(OUT_DIR, "backbone_fixture.json"), "w") as f:
        json.dump(fixture, f)
    print("fixture written:", f2.shape, f3.shape, pooled.shape)


if __name__ == "__main__":
    main()
