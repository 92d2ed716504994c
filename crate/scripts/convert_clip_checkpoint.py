#!/usr/bin/env python3
"""Convert an OpenAI CLIP ViT-B/32 checkpoint into backbone weights.

Reads either the original TorchScript archive (ViT-B-32.pt) or a plain
state dict, keeps exactly the tensors named in assets/vit_b32_manifest.json,
checks their shapes and writes a safetensors file in F32. The BPE vocabulary
(bpe_simple_vocab_16e6.txt.gz) must sit next to the output file.

    python scripts/convert_clip_checkpoint.py ViT-B-32.pt weights/vit_b32.safetensors

Requires torch and safetensors.
"""

import argparse
import json
import sys
from pathlib import Path

import torch
from safetensors.torch import save_file

MANIFEST = Path(__file__).resolve().parent.parent / "assets" / "vit_b32_manifest.json"


def load_state_dict(path):
    try:
        model = torch.jit.load(path, map_location="cpu")
        return model.state_dict()
    except RuntimeError:
        sd = torch.load(path, map_location="cpu")
        return sd.get("state_dict", sd)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("output")
    args = ap.parse_args()

    manifest = json.loads(MANIFEST.read_text())
    sd = load_state_dict(args.checkpoint)
    out, problems = {}, []
    for entry in manifest:
        name, shape = entry["name"], entry["shape"]
        t = sd.get(name)
        if t is None:
            problems.append(f"missing {name}")
        elif list(t.shape) != shape:
            problems.append(f"{name}: shape {list(t.shape)}, expected {shape}")
        else:
            out[name] = t.detach().to(torch.float32).contiguous()
    if problems:
        sys.exit("\n".join(problems))

    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_file(out, args.output)
    dropped = sorted(set(sd) - set(out))
    print(f"wrote {len(out)} tensors to {args.output}; ignored {', '.join(dropped) or 'nothing'}")


if __name__ == "__main__":
    main()
