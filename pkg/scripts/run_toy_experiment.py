#!/usr/bin/env python3
"""End-to-end desk-scale experiment: teacher, guided student, RD evaluation.

Trains a small teacher on synthetic images, then a bound-guided student with
sampled rate multipliers, evaluates both guided and unguided students over a
lambda sweep on held-out images, and writes RD curves plus a plot.

Everything runs on CPU; with the defaults below the whole script takes tens
of minutes.
"""

import argparse
from pathlib import Path

from bgvae.cli import main as bgvae_cli
from bgvae.config import TrainConfig
from bgvae.data import make_toy_dataset
from bgvae.distill import train


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/toy_experiment")
    parser.add_argument("--iterations", type=int, default=2000)
    parser.add_argument("--teacher-iterations", type=int, default=1000)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    train_dir = out / "data" / "train"
    test_dir = out / "data" / "test"
    make_toy_dataset(train_dir, count=100, size=96, seed=args.seed)
    make_toy_dataset(test_dir, count=10, size=96, seed=args.seed + 1000)

    base = dict(
        dataset=str(train_dir),
        batch_size=args.batch_size,
        crop_size=64,
        lambda_mode="sampled",
        arch="toy",
        seed=args.seed,
    )

    print("== teacher ==")
    teacher = train(
        TrainConfig.from_dict({**base, "variant": "teacher",
                               "iterations": args.teacher_iterations}),
        out_dir=out / "teacher",
    )

    print("== guided student ==")
    guided = train(
        TrainConfig.from_dict({**base, "guidance": True, "iterations": args.iterations}),
        teacher_ckpt=teacher["checkpoint"],
        out_dir=out / "student_guided",
    )

    print("== unguided student ==")
    unguided = train(
        TrainConfig.from_dict({**base, "iterations": args.iterations}),
        out_dir=out / "student_unguided",
    )

    lambdas = "64,181,512,1448,4096,8192"
    for name, ckpt in (("guided", guided), ("unguided", unguided)):
        bgvae_cli([
            "eval", str(test_dir),
            "--checkpoint", ckpt["checkpoint"],
            "--lambdas", lambdas,
            "--out", str(out / f"report_{name}.csv"),
            "--label", name,
        ])

    bgvae_cli([
        "rdplot",
        str(out / "report_unguided.csv"),
        str(out / "report_guided.csv"),
        "--out", str(out / "rd_curves.png"),
    ])
    print(f"done; see {out / 'rd_curves.png'}")


if __name__ == "__main__":
    main()
