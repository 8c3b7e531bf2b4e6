"""Look inside one forward pass: channel selection weights and attention maps.

    python3 demos/inspect_internals.py [outdir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from misnet import ModelConfig, build_model
from misnet.attention import export_attention_maps
from misnet.datapipe import synthetic_pair, to_tensor
from misnet.fusion import dump_selection_weights

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="misnet-inspect-"))
torch.manual_seed(0)

model = build_model(ModelConfig(backbone_id="toy", train_size=96)).eval()
img, mask = synthetic_pair(np.random.default_rng(3), size=96)
with torch.no_grad():
    sides = model(to_tensor(img)[None])

# g and h are a per-channel softmax over the two fused branches, so each
# pair sums to one. Untrained weights stay fairly close to 0.5.
g, h = sides.aux["g"][0], sides.aux["h"][0]
print(f"g range [{g.min():.3f}, {g.max():.3f}], max |g + h - 1| = {(g + h - 1).abs().max():.1e}")
dump_selection_weights(g, h, out / "selection.csv")

# Reverse weights highlight what the coarser map missed; boundary weights
# peak where that map is uncertain (probability near 0.5).
maps = {k: v for k, v in sides.aux.items() if k[0] in "rb"}
for name, w in maps.items():
    print(f"{name}: shape {tuple(w.shape[-2:])}, mean {w.mean():.3f}")
export_attention_maps(maps, out / "attention")

for name in ("m_fuse", "m5", "m4", "m3"):
    print(f"{name} logits at {tuple(getattr(sides, name).shape[-2:])}")
print(f"final probability map {tuple(sides.final.shape[-2:])}, mask covers {mask.mean():.1%}")
print(f"wrote {out}")
