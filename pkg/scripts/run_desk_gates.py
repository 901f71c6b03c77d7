"""Train the desk-scale MNIST models used by the acceptance gates.

Runs the coupling model (5,000 steps) and the MAF variant (2,000 steps)
one after the other; finished runs with an unchanged config are skipped.

    python3 scripts/run_desk_gates.py --data-dir data/mnist
"""
import argparse
import logging
import time

from mixerflow.config import load_config
from mixerflow.train import train_or_reuse


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--configs", nargs="+", default=["configs/mnist_desk.cfg", "configs/mnist_maf.cfg"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for path in args.configs:
        run = load_config(path).replace(data_dir=args.data_dir)
        t0 = time.time()
        ck = train_or_reuse(run)
        print(f"{path}: step {ck.step} in {time.time() - t0:.0f}s, last {ck.history[-1]}", flush=True)


if __name__ == "__main__":
    main()
