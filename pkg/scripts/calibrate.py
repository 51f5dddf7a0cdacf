"""Brute-force calibration run: the deterministic gru-ed baseline on sine+noise.

Prints RMSE and R per horizon so forecasting thresholds can be judged against
what a plain recurrent encoder-decoder reaches on the same split.

    python3 scripts/calibrate.py --epochs 100 --seeds 0 1 2
"""

import argparse
import time

from bedma.data import WindowConfig, denormalize, prepare, synth_series
from bedma.metrics import evaluate
from bedma.model import ModelConfig, build_model, predict_mc
from bedma.training import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variant", default="gru-ed")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--t", type=int, default=6)
    args = p.parse_args()

    pd = prepare(synth_series("sine+noise", 6000, 144, 0.05, seed=0), WindowConfig(args.t, 6))
    y = denormalize(pd.test.targets, pd.stats)
    for seed in args.seeds:
        t0 = time.perf_counter()
        model = build_model(ModelConfig(variant=args.variant, window=args.t, horizon=6), seed=seed)
        model, hist = train(pd.train, model, TrainConfig(epochs=args.epochs, seed=seed))
        mean = denormalize(predict_mc(model, pd.test.inputs[..., None], n_mc=30, seed=1).mean, pd.stats)
        cells = []
        for h in (1, 3, 6):
            rep = evaluate(mean[:, h - 1], y[:, h - 1])
            cells.append(f"h{h} rmse={rep.rmse:.4f} R={rep.r:.4f}")
        print(f"{args.variant} seed={seed} best_epoch={hist.best_epoch} {time.perf_counter() - t0:.0f}s  " + "  ".join(cells))


if __name__ == "__main__":
    main()
