"""Write LQ problem files from a generator config.

Usage: python -m ocgeom.problems.lq CONFIG.json OUTDIR
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from . import lq_from_config


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2:
        print(__doc__.strip(), file=sys.stderr)
        return 1
    out = Path(argv[1])
    out.mkdir(parents=True, exist_ok=True)
    for problem in lq_from_config(argv[0]):
        target = out / f"{problem.name}.json"
        target.write_text(json.dumps(problem.to_document(), indent=2) + "\n", encoding="utf-8")
        print(target)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
