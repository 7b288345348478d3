#!/usr/bin/env python3
"""Regenerate tests/golden_checksums.txt.

Runs the pinned local experiment config end to end in a scratch
directory and records SHA-256 digests of the scene container, the
training report, and the trained-parameter container. The digests only
change when the generator, the module, or the training loop changes
behavior; rerun this script deliberately when they do.
"""

import hashlib
import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from flowagg.cli import main as cli_main

ROOT = os.path.join(os.path.dirname(__file__), os.pardir)
CONFIG = os.path.join(ROOT, "configs", "occlusion_local.cfg")
OUT = os.path.join(ROOT, "tests", "golden_checksums.txt")


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def main():
    with tempfile.TemporaryDirectory() as tmp:
        scene = os.path.join(tmp, "scene.gtc")
        run = os.path.join(tmp, "run")
        assert cli_main(["gen", "--config", CONFIG, "--out", scene]) == 0
        assert cli_main(["train", "--config", CONFIG, "--scene", scene,
                         "--out", run]) == 0
        rows = [
            ("scene.gtc", sha256(scene)),
            ("report.txt", sha256(os.path.join(run, "report.txt"))),
            ("params.gtc", sha256(os.path.join(run, "params.gtc"))),
        ]
    with open(OUT, "w", encoding="utf-8") as fh:
        for name, digest in rows:
            fh.write(f"{digest}  {name}\n")
    for name, digest in rows:
        print(f"{digest}  {name}")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
