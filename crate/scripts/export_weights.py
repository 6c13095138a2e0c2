#!/usr/bin/env python3
"""Export ImageNet weights for cxr-bench.

Usage: python3 scripts/export_weights.py BACKBONE [DIR]

Writes DIR/BACKBONE.safetensors (DIR defaults to ./weights). Needs torch,
torchvision, safetensors and, for inception_resnetv2, timm. The classifier
head is dropped; cxr-bench attaches a fresh two-class head.
"""

import os
import sys


def build(name):
    import torchvision

    if name == "inception_resnetv2":
        import timm

        return timm.create_model("inception_resnet_v2", pretrained=True), "classif."
    ctors = {
        "resnet50": torchvision.models.resnet50,
        "resnet101": torchvision.models.resnet101,
        "resnet152": torchvision.models.resnet152,
        "inceptionv3": torchvision.models.inception_v3,
    }
    if name not in ctors:
        sys.exit(f"unknown backbone {name!r}; expected one of {sorted(ctors) + ['inception_resnetv2']}")
    return ctors[name](weights="IMAGENET1K_V1"), "fc."


def main():
    if len(sys.argv) not in (2, 3):
        sys.exit(__doc__)
    name = sys.argv[1]
    out = sys.argv[2] if len(sys.argv) == 3 else "weights"
    from safetensors.torch import save_file

    model, head = build(name)
    state = {
        k: v.float().contiguous()
        for k, v in model.state_dict().items()
        if not k.startswith(head) and not k.startswith("AuxLogits.") and "num_batches_tracked" not in k
    }
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"{name}.safetensors")
    save_file(state, path)
    print(f"wrote {path} ({len(state)} tensors)")


if __name__ == "__main__":
    main()
