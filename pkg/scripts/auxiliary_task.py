"""Annotated primary task alone vs with the comb auxiliary loss, over seeds.

Held-out R@25 medians are compared. The annotated set is small, hence the
smaller default batch.

    python3 scripts/auxiliary_task.py --seeds 0 1 2
"""

from _common import config, emit, parser, threads

from kgret.experiments import median_r25, run_auxiliary


def main():
    p = parser(__doc__, batch_size=32)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    with threads(args):
        result = run_auxiliary(config(args), seeds=args.seeds)
    medians = {s: median_r25(result, s) for s in ("primary-only", "multitask")}
    print("median R@25:", ", ".join(f"{k} {v:.4f}" for k, v in medians.items()))
    emit(result, args, {"median_r25": medians})


if __name__ == "__main__":
    main()
