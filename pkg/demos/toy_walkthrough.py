"""End-to-end toy run through the command line: data, split, train, evaluate.

Writes 200 synthetic 32x32 images (two separable classes) and drives the
``cvrnet`` commands on them. The default 30 epochs take about 40 s on a
desktop CPU; pass an output directory to keep the artifacts.

    python demos/toy_walkthrough.py [OUT_DIR] [EPOCHS]
"""

import sys
import tempfile
from pathlib import Path

from cvrnet.cli import main
from cvrnet.synthetic import write_toy_dataset

CONFIG = """\
# desk-scale model: 32 x 32 input, one eighth of the channel widths
input_size = 32
width_multiplier = 1/8
batch_size = 16
"""


def run(argv):
    print(f"\n$ cvrnet {' '.join(argv)}")
    code = main(argv)
    if code:
        sys.exit(code)


def walkthrough(out: Path, epochs: int) -> None:
    data = out / "data"
    write_toy_dataset(data, n_per_class=100)
    (out / "toy.cfg").write_text(CONFIG)
    run(["split", "--data", str(data), "--k", "5", "--seed", "0", "--out", str(out / "plan.json")])
    run(["train", "--config", str(out / "toy.cfg"), "--data", str(data), "--plan", str(out / "plan.json"),
         "--fold", "0", "--epochs", str(epochs), "--deterministic", "--out", str(out / "fold0")])
    run(["evaluate", "--model", str(out / "fold0" / "best.ckpt"), "--config", str(out / "toy.cfg"),
         "--data", str(data), "--plan", str(out / "plan.json"), "--fold", "0", "--out", str(out / "eval0")])
    print(f"\nartifacts under {out}")


if __name__ == "__main__":
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
    if len(sys.argv) > 1:
        target = Path(sys.argv[1])
        target.mkdir(parents=True, exist_ok=True)
        walkthrough(target, epochs)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            walkthrough(Path(tmp), epochs)
