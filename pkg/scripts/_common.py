"""Shared argument handling for the experiment scripts."""

import argparse
import json
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from kgret.evalkit import summary_table
from kgret.experiments import DeskConfig
from kgret.trainer import TrainConfig


def parser(description: str, epochs: int = 10, batch_size: int = 128) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--lr-peak", type=float, default=3e-4)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path, help="write the summary records here (JSON)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config(args) -> DeskConfig:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return DeskConfig(train=TrainConfig(max_epochs=args.epochs, batch_size=args.batch_size, lr_peak=args.lr_peak))


def threads(args):
    return threadpool_limits(args.threads)


def emit(result, args, extra=None) -> None:
    reports = list(result.reports.values())
    print(summary_table(reports), end="")
    if result.info:
        print(json.dumps(result.info, sort_keys=True))
    if args.out:
        payload = {"reports": [r.summary_record() for r in reports], "info": result.info, **(extra or {})}
        args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
