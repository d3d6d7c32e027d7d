#!/usr/bin/env python3
"""Write a simulated commit history (JSON) and matching commits file.

The pair drives ``bench_sentry.py ci-nightly --history`` or ``bisect --history`` without
a real repository, e.g.::

    python scripts/make_history.py --n 70 --culprit 42 --out /tmp/day
    python bench_sentry.py bisect --cell synth-conv/train/cpu --history /tmp/day/history.json

Give each simulated day its own ``--prefix`` so the previous nightly stays outside the
next day's range.
"""

import argparse
import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

project_root = Path(__file__).resolve().parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from utils.bisection import SimulatedHistory  # noqa: E402
from utils.regression import Metric  # noqa: E402


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, required=True, help="commits in the range")
    parser.add_argument("--culprit", type=int, help="index of the first regressing commit")
    parser.add_argument("--step", type=float, default=0.2)
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--unbuildable", type=int, nargs="*", default=[])
    parser.add_argument("--metric", choices=[m.value for m in Metric], default=Metric.WALL_TIME.value)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--prefix", help="commit id prefix, e.g. day2- (default ids are sim0000, sim0001, ...)")
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)

    history = SimulatedHistory(
        n=args.n,
        culprit=args.culprit,
        step=args.step,
        noise=args.noise,
        unbuildable=frozenset(args.unbuildable),
        metric=args.metric,
        seed=args.seed,
        commits=tuple(f"{args.prefix}{i:04d}" for i in range(args.n)) if args.prefix else None,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.json").write_text(history.model_dump_json(indent=2, exclude={"artifact_dir"}))

    start = datetime.now(timezone.utc).replace(microsecond=0) - timedelta(hours=24)
    step = timedelta(hours=24) / max(1, args.n)
    lines = [f"{commit} {(start + step * i).isoformat()}" for i, commit in enumerate(history.commit_ids())]
    (out / "commits.txt").write_text("\n".join(lines) + "\n")

    print(f"✅ {args.n} commits written to {out} (first bad: {history.first_bad() or 'none'})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
