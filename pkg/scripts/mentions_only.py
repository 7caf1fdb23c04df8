"""Unseen mentions of seen concepts: trained encoder vs BM25 vs untrained.

    python3 scripts/mentions_only.py --epochs 10
"""

from _common import config, emit, parser, threads

from kgret.experiments import run_mentions_only


def main():
    args = parser(__doc__).parse_args()
    with threads(args):
        result = run_mentions_only(config(args))
    emit(result, args)


if __name__ == "__main__":
    main()
