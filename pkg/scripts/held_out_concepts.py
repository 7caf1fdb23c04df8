"""20% of concepts removed from every training pair; evaluate their mentions.

    python3 scripts/held_out_concepts.py --epochs 10 --fraction 0.2
"""

from _common import config, emit, parser, threads

from kgret.experiments import run_mentions_and_concepts


def main():
    p = parser(__doc__)
    p.add_argument("--fraction", type=float, default=0.2)
    args = p.parse_args()
    with threads(args):
        result = run_mentions_and_concepts(config(args), fraction=args.fraction)
    emit(result, args)


if __name__ == "__main__":
    main()
