#!/usr/bin/env python3
"""Export ResNet-50 weights to the ANOC archive the `anoclass` tools load.

Run this once, out-of-band, on a machine that has torch + torchvision and the
pretrained weights (downloaded or a local .pth state dict):

    python tools/export_backbone.py --out resnet50.anoc
    python tools/export_backbone.py --state-dict resnet50-0676ba61.pth --out resnet50.anoc

The resulting file is what `anoclass extract --backbone resnet50.anoc ...`
consumes. No network access is needed at extraction time.
"""

import argparse

import torch
import torchvision

from anoc_format import module_tensors, write_archive

DESCRIPTOR = {
    "kind": "backbone",
    "arch": "bottleneck-residual",
    "id": "resnet50-imagenet",
    "stem_channels": 64,
    "stage_blocks": [3, 4, 6, 3],
    "stage_channels": [64, 128, 256, 512],
    "expansion": 4,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--state-dict", help="local .pth state dict; default: torchvision download")
    ap.add_argument("--out", required=True, help="output .anoc path")
    args = ap.parse_args()

    if args.state_dict:
        model = torchvision.models.resnet50()
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
    else:
        model = torchvision.models.resnet50(
            weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1
        )
    model.eval()

    tensors = [(n, a) for n, a in module_tensors(model) if not n.startswith("fc.")]
    write_archive(args.out, DESCRIPTOR, tensors)
    print(f"wrote {args.out} ({len(tensors)} tensors)")


if __name__ == "__main__":
    main()
