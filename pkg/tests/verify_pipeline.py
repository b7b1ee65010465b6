"""
End-to-end check on a seeded synthetic scene with the default optimizer settings:
synth -> select -> optimize -> evaluate. Exits non-zero when recovery falls short.
"""

import json
import sys
import tempfile
from datetime import datetime
from pathlib import Path
from zoneinfo import ZoneInfo

from src.cli.main import main as cli

UTC = ZoneInfo("UTC")
SEED = 7
MIN_SUCCESS_RATE = 2 / 3


def get_utc_time() -> str:
    return datetime.now(UTC).isoformat()


def run_step(name: str, argv: list[str]) -> None:
    print(f"\n[{get_utc_time()}] --- {name.upper()} ---")
    print(f"[{get_utc_time()}] scenefit {' '.join(argv)}")
    start_time = datetime.now()
    code = cli(argv)
    duration = (datetime.now() - start_time).total_seconds()
    print(f"[{get_utc_time()}] {name} took {duration:.2f} seconds (exit {code}).")
    if code != 0:
        print(f"ERROR: {name} failed with exit code {code}")
        sys.exit(code)


def main() -> None:
    print(f"Script started at {get_utc_time()} (UTC)")
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        job, run = root / "job", root / "run"
        manifest = str(job / "manifest.json")

        run_step("synth", ["synth", str(job), "--seed", str(SEED)])
        run_step("select", ["select", manifest, str(root / "selection.json")])
        run_step("optimize", ["optimize", manifest, str(run), "--seed", str(SEED)])
        report_path = root / "report.json"
        run_step(
            "evaluate",
            [
                "evaluate",
                str(run / "layout.json"),
                str(job / "ground_truth.json"),
                "--format",
                "json",
                "--out",
                str(report_path),
            ],
        )

        report = json.loads(report_path.read_text())
        print(f"[{get_utc_time()}] RESULTS:")
        print(json.dumps(report, indent=2))

        recovery = report.get("recovery") or {}
        rate = recovery.get("success_rate", 0.0)
        if rate < MIN_SUCCESS_RATE:
            print(f"ERROR: recovery rate {rate:.2f} is below {MIN_SUCCESS_RATE:.2f}")
            sys.exit(1)

    print(f"\n[{get_utc_time()}] Tests completed.")


if __name__ == "__main__":
    main()
