"""Full desk-scale protocol: three architectures, all six attacks, all six
defenses, the complete 20-point strength grid. Expect a long run (roughly an
hour on one core); results land as CSV/JSON/SVG plus per-cell adversarial
batches for auditing:

    python3 scripts/run_full_sweep.py --out full_out --max-workers 4
"""

import argparse
import json
import sys
from pathlib import Path

from fddbench import cli


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="full_out")
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--max-workers", type=int, default=1)
    parser.add_argument("--cap", type=int, default=300,
                        help="test windows per cell (iterative attacks dominate runtime)")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    adv = {"kind": "PGD", "epsilon": 0.1, "pgd_steps": 10, "pgd_alpha": None,
           "deepfool_max_iters": 50, "cw_iters": 100, "cw_lr": 0.01, "seed": 5}
    fgsm = dict(adv, kind="FGSM")
    config = {
        "data": {
            "synth": {"seed": args.seed, "classes": 5, "sensors": 8, "run_length": 115,
                      "runs_per_class": 10, "separation": 2.5, "near_pair_gap": 1.05},
            "window": 16,
            "train_fraction": 0.8,
            "split_seed": args.seed,
        },
        "models": [
            {"arch": "MLP", "hidden": [64], "epochs": 12, "seed": 1},
            {"arch": "GRU", "hidden": [32], "epochs": 10, "learning_rate": 0.003, "seed": 1},
            {"arch": "TCN", "hidden": [32, 32, 32], "epochs": 10, "learning_rate": 0.003, "seed": 1},
        ],
        "attacks": ["Noise", "FGSM", "FGSMDistill", "PGD", "DeepFool", "CW"],
        "defenses": [
            {"kind": "AdvTraining", "adv_attack": adv, "adv_eps_mode": "range(0.015,0.3)",
             "adv_lambda": 1.0},
            {"kind": "Autoencoder", "ae_noise": 0.1},
            {"kind": "Quantization", "quant_bits": 5},
            {"kind": "Regularization", "reg_h": 0.001, "reg_lambda": 1.0},
            {"kind": "Distillation", "distill_T": 100.0},
            {"kind": "Combination", "combo": {"adv": fgsm, "quant_bits": 5}},
        ],
        "test_sample_cap": args.cap,
        "master_seed": args.seed,
    }
    cfg_path = out / "sweep_config.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")
    argv = ["sweep", "--config", str(cfg_path), "--out", str(out / "report"),
            "--save-batches"]
    if args.max_workers > 1:
        argv += ["--max-workers", str(args.max_workers)]
    rc = cli.main(argv)
    print(f"report files in {out / 'report'}", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
