"""End-to-end desk-scale demo: synthetic corpus -> sweep -> report files.

Small grid and two defenses so it finishes in a couple of minutes:

    python3 scripts/run_desk_benchmark.py --out desk_out
"""

import argparse
import json
import sys
from pathlib import Path

from fddbench import cli


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="desk_out")
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()

    out = Path(args.out)
    raw = out / "raw"
    cache = out / "cache"

    rc = cli.main(["synth", "--classes", "5", "--sensors", "8", "--runs", "10",
                   "--length", "115", "--seed", str(args.seed),
                   "--separation", "2.5", "--near-pair-gap", "1.05",
                   "--out", str(raw)])
    if rc:
        return rc
    rc = cli.main(["ingest", "--path", str(raw), "--window", "16",
                   "--seed", str(args.seed), "--out", str(cache)])
    if rc:
        return rc

    config = {
        "data": {"cache": str(cache / "cache.npz")},
        "models": [{"arch": "MLP", "hidden": [64], "epochs": 12, "seed": 1}],
        "attacks": ["Noise", "FGSM", "PGD", "DeepFool"],
        "defenses": [
            {"kind": "Quantization", "quant_bits": 5},
            {"kind": "Distillation", "distill_T": 100.0},
        ],
        "epsilon_grid": [0.015, 0.03, 0.06, 0.09, 0.15, 0.21, 0.3],
        "test_sample_cap": 500,
        "master_seed": args.seed,
    }
    cfg_path = out / "sweep_config.json"
    out.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")
    rc = cli.main(["sweep", "--config", str(cfg_path), "--out", str(out / "report")])
    print(f"report files in {out / 'report'}", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
