#!/usr/bin/env python3
"""The whole experiment at miniature scale, through the pipeline API.

Synthesises a corpus, augments it, extracts layered features, clusters clean
frames, trains the denoiser, decodes the unseen-noise test set, and prints the
per-condition report next to the no-denoiser baseline. Takes about a minute.

The same flow is available from the shell:

    unitdenoise --config configs/micro.cfg --workdir /tmp/run all
    unitdenoise --config configs/micro.cfg --workdir /tmp/run report
"""

import tempfile
from pathlib import Path

from unitdenoise.config import load_config
from unitdenoise.pipeline import Pipeline

repo = Path(__file__).resolve().parent.parent
cfg = load_config(repo / "configs" / "micro.cfg")
cfg.train.epochs = 10  # a bit more than the smoke-test default

work = Path(tempfile.mkdtemp(prefix="demo04_"))
print(f"working directory: {work}")

pipe = Pipeline(cfg, work)
pipe.run_all()
print(pipe.run_report())
print(f"\nartifacts left in {work} for inspection")
