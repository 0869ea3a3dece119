#!/usr/bin/env python3
"""Convert torchvision VGG16 ImageNet weights into the dse array-store layout.

    python3 tools/convert_vgg16.py OUT_DIR [--weights vgg16.pth]

Without --weights the torchvision pretrained checkpoint is downloaded (needs
network access). Point backbone.path or $DSE_BACKBONE at OUT_DIR and set
backbone.source = "vgg16".
"""
import argparse
import json
import os
import shutil
import tempfile

import numpy as np

FEATURE_CONVS = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]
CONV_NAMES = ["conv1_1", "conv1_2", "conv2_1", "conv2_2",
              "conv3_1", "conv3_2", "conv3_3",
              "conv4_1", "conv4_2", "conv4_3",
              "conv5_1", "conv5_2", "conv5_3"]
HEAD = {"classifier.0": "fc6", "classifier.3": "fc7", "classifier.6": "fc"}


def load_state(weights):
    import torch
    if weights:
        return torch.load(weights, map_location="cpu")
    from torchvision.models import vgg16, VGG16_Weights
    return vgg16(weights=VGG16_Weights.IMAGENET1K_V1).state_dict()


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out_dir")
    ap.add_argument("--weights", help="local torchvision vgg16 state_dict (.pth)")
    args = ap.parse_args()

    state = load_state(args.weights)
    arrays = {}
    for idx, name in zip(FEATURE_CONVS, CONV_NAMES):
        arrays[f"{name}.weight"] = state[f"features.{idx}.weight"]
        arrays[f"{name}.bias"] = state[f"features.{idx}.bias"]
    for src, dst in HEAD.items():
        arrays[f"{dst}.weight"] = state[f"{src}.weight"]
        arrays[f"{dst}.bias"] = state[f"{src}.bias"]
    arrays["input_mean"] = np.array([0.485, 0.456, 0.406], dtype=np.float32).reshape(1, 3, 1, 1)
    arrays["input_std"] = np.array([0.229, 0.224, 0.225], dtype=np.float32).reshape(1, 3, 1, 1)

    parent = os.path.dirname(os.path.abspath(args.out_dir))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".vgg16-", dir=parent)
    entries = []
    for name, value in arrays.items():
        a = np.ascontiguousarray(np.asarray(value, dtype=np.float32))
        a.astype("<f4").tofile(os.path.join(tmp, name + ".bin"))
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float32", "file": name + ".bin"})
    manifest = {
        "format": "dse-arrays/1",
        "kind": "backbone",
        "meta": {"widths": [64, 128, 256, 512, 512], "convs_per_block": [2, 2, 3, 3, 3],
                 "head": "vgg_classifier", "n_classes": 1000, "hidden": 4096},
        "arrays": entries,
    }
    with open(os.path.join(tmp, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    if os.path.exists(args.out_dir):
        shutil.rmtree(args.out_dir)
    os.rename(tmp, args.out_dir)
    print(f"wrote {len(entries)} arrays to {args.out_dir}")


if __name__ == "__main__":
    main()
