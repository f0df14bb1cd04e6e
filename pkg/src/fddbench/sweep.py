"""Strength-sweep experiment engine.

For every (model, defense, attack, epsilon) cell: train the protected model
once, attack the shared test subset, audit the perturbation bound, and record
accuracy. Reports render as CSV (rows = attack x defense, columns = epsilon),
a JSON mirror, and plain polyline SVG charts, all byte-deterministic for a
fixed config, dataset and master seed.

Cell attack seeds derive from the master seed and the cell coordinates, so
cells are reproducible independently of execution order; cells within one
trained model may evaluate on worker threads.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import defenses as dfs
from . import models as md
from .data import WindowedDataset

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.015 * i, 6) for i in range(1, 21))  # 0.015 .. 0.300
REPORT_VERSION = 1


def default_epsilon_grid() -> list[float]:
    return list(DEFAULT_GRID)


@dataclass
class SweepConfig:
    models: list[dict]                      # partial model configs; window/sensors/classes come from data
    attacks: list[str] = field(default_factory=lambda: list(atk.ATTACK_KINDS))
    defenses: list[dfs.DefenseSpec] = field(default_factory=list)
    epsilon_grid: list[float] = field(default_factory=default_epsilon_grid)
    test_sample_cap: int = 1000
    master_seed: int = 0
    repetitions: int = 1
    max_workers: int = 1

    def __post_init__(self):
        if not self.models:
            raise ValueError("sweep needs at least one model")
        grid = list(self.epsilon_grid)
        if any(e < 0 for e in grid) or sorted(set(grid)) != grid:
            raise ValueError("epsilon grid must be strictly increasing and non-negative")
        self.epsilon_grid = grid
        for kind in self.attacks:
            if kind not in atk.ATTACK_KINDS:
                raise ValueError(f"unknown attack kind '{kind}'")
        if self.test_sample_cap < 1:
            raise ValueError("test_sample_cap must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def to_json(self) -> dict:
        blob = asdict(self)
        blob["defenses"] = [d.to_json() for d in self.defenses]
        return blob

    @classmethod
    def from_json(cls, blob: dict) -> "SweepConfig":
        data = dict(blob)
        data["defenses"] = [dfs.DefenseSpec.from_json(d) for d in data.get("defenses", [])]
        return cls(**data)

    def hash(self) -> str:
        doc = self.to_json()
        doc.pop("max_workers", None)  # execution policy, not experiment identity
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class SweepReport:
    epsilon_grid: list[float]
    model_names: list[str]
    defense_names: list[str]
    attack_names: list[str]
    clean: dict                       # (model, defense) -> float
    cells: dict                       # (model, defense, attack, eps_key) -> float or {"error": msg}
    config_hash: str
    data_fingerprint: str
    master_seed: int
    test_sample_cap: int
    repetitions: int
    wall_time_s: float = field(compare=False, default=0.0)

    def eps_key(self, eps: float) -> str:
        return f"{eps:.3f}"

    def cell(self, model: str, defense: str, attack: str, eps: float):
        return self.cells[(model, defense, attack, self.eps_key(eps))]

    def error_cells(self) -> list[tuple]:
        return [k for k, v in self.cells.items() if isinstance(v, dict)]

    def hash(self) -> str:
        doc = _report_json(self, include_hash=False)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _cell_seed(master: int, model: str, defense: str, attack: str, eps: float, rep: int) -> int:
    tag = f"{master}|{model}|{defense}|{attack}|{eps:.6f}|{rep}".encode()
    return int.from_bytes(hashlib.sha256(tag).digest()[:4], "little")


def _resolve_model_config(entry: dict, data: WindowedDataset) -> md.ModelConfig:
    blob = dict(entry)
    blob.setdefault("window", data.k)
    blob.setdefault("sensors", data.sensors)
    blob.setdefault("classes", data.class_count)
    if blob["window"] != data.k:
        raise ValueError(f"model window {blob['window']} does not match data window {data.k}")
    if "hidden" in blob:
        blob["hidden"] = tuple(blob["hidden"])
    return md.ModelConfig(**blob)


def _unique_names(base_names: list[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for name in base_names:
        if base_names.count(name) == 1:
            out.append(name)
            continue
        seen[name] = seen.get(name, 0) + 1
        out.append(f"{name}_{seen[name]}")
    return out


def run_sweep(config: SweepConfig, train: WindowedDataset, test: WindowedDataset,
              artifact_dir=None) -> SweepReport:
    """Execute the full sweep. Data must already be split; the test subset is
    capped once and shared by every cell. With ``artifact_dir`` set, every
    protected model and every adversarial batch is saved for later audits."""
    start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.master_seed), 0x5EEB]))
    if len(test) > config.test_sample_cap:
        pick = np.sort(rng.choice(len(test), size=config.test_sample_cap, replace=False))
        subset = test.subset(pick)
    else:
        subset = test

    model_names = _unique_names([e.get("arch", "MLP") for e in config.models])
    defense_names = ["Unprotected"] + _unique_names([d.kind for d in config.defenses])
    defense_specs: list[dfs.DefenseSpec | None] = [None] + list(config.defenses)

    clean: dict = {}
    cells: dict = {}
    eps_key = lambda e: f"{e:.3f}"

    if artifact_dir is not None:
        artifact_dir = Path(artifact_dir)
        (artifact_dir / "models").mkdir(parents=True, exist_ok=True)
        (artifact_dir / "batches").mkdir(parents=True, exist_ok=True)

    for mname, mentry in zip(model_names, config.models):
        mcfg = _resolve_model_config(mentry, train)
        for dname, dspec in zip(defense_names, defense_specs):
            log.info("training %s / %s", mname, dname)
            try:
                protected = dfs.defend(mcfg, train, dspec)
            except (md.TrainingError, ValueError, atk.AttackError) as exc:
                # a defense that fails to train poisons all of its cells
                log.warning("defense %s / %s failed to train: %s", mname, dname, exc)
                note = {"error": f"defense training failed: {exc}"}
                clean[(mname, dname)] = note
                for attack_kind in config.attacks:
                    for eps in config.epsilon_grid:
                        cells[(mname, dname, attack_kind, eps_key(eps))] = note
                continue
            clean[(mname, dname)] = md.accuracy(protected, subset)

            model_path = None
            if artifact_dir is not None:
                model_path = artifact_dir / "models" / f"{mname}__{dname}.json"
                dfs.save_protected(protected, model_path)

            def eval_cell(attack_kind: str, eps: float):
                accs = []
                last_batch = None
                for rep in range(config.repetitions):
                    seed = _cell_seed(config.master_seed, mname, dname, attack_kind, eps, rep)
                    spec = atk.AttackSpec(attack_kind, eps, seed=seed)
                    batch = atk.attack_batch(protected, subset, spec, train_data=train)
                    if not batch.bound_ok.all():
                        bad = int(np.flatnonzero(~batch.bound_ok)[0])
                        raise atk.AttackError(
                            f"perturbation bound violated at sample {bad} (eps={eps})")
                    view = WindowedDataset(batch.perturbed, subset.labels,
                                           subset.run_ids, subset.k)
                    accs.append(md.accuracy(protected, view))
                    last_batch = batch
                return float(np.mean(accs)), last_batch

            for attack_kind in config.attacks:
                def run_one(eps, attack_kind=attack_kind):
                    try:
                        acc, batch = eval_cell(attack_kind, eps)
                        return eps, acc, batch
                    except (atk.AttackError, ValueError) as exc:
                        log.warning("cell (%s, %s, %s, %.3f) failed: %s",
                                    mname, dname, attack_kind, eps, exc)
                        return eps, {"error": str(exc)}, None

                if config.max_workers > 1:
                    with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
                        results = list(pool.map(run_one, config.epsilon_grid))
                else:
                    results = [run_one(e) for e in config.epsilon_grid]

                for eps, value, batch in results:
                    cells[(mname, dname, attack_kind, eps_key(eps))] = value
                    if artifact_dir is not None and batch is not None:
                        name = f"{mname}__{dname}__{attack_kind}__{eps_key(eps)}.npz"
                        atk.save_batch(batch, artifact_dir / "batches" / name,
                                       model_path=f"../models/{mname}__{dname}.json")

    return SweepReport(
        epsilon_grid=list(config.epsilon_grid),
        model_names=model_names,
        defense_names=defense_names,
        attack_names=list(config.attacks),
        clean=clean,
        cells=cells,
        config_hash=config.hash(),
        data_fingerprint=hashlib.sha256(
            (train.fingerprint() + test.fingerprint()).encode()).hexdigest(),
        master_seed=config.master_seed,
        test_sample_cap=config.test_sample_cap,
        repetitions=config.repetitions,
        wall_time_s=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# rendering


def _report_json(report: SweepReport, include_hash: bool = True) -> dict:
    models_doc = {}
    for m in report.model_names:
        attacks_doc = {}
        for a in report.attack_names:
            attacks_doc[a] = {
                d: {report.eps_key(e): report.cell(m, d, a, e) for e in report.epsilon_grid}
                for d in report.defense_names
            }
        models_doc[m] = {
            "clean": {d: report.clean[(m, d)] for d in report.defense_names},
            "attacks": attacks_doc,
        }
    doc = {
        "format": "fddbench-report",
        "version": REPORT_VERSION,
        "master_seed": report.master_seed,
        "test_sample_cap": report.test_sample_cap,
        "repetitions": report.repetitions,
        "epsilon_grid": [report.eps_key(e) for e in report.epsilon_grid],
        "config_hash": report.config_hash,
        "data_fingerprint": report.data_fingerprint,
        "models": models_doc,
    }
    if include_hash:
        doc["report_hash"] = report.hash()
    return doc


def report_from_json(doc: dict) -> SweepReport:
    if doc.get("format") != "fddbench-report" or doc.get("version") != REPORT_VERSION:
        raise ValueError("not a recognized sweep report document")
    models = list(doc["models"])
    first = doc["models"][models[0]]
    defense_names = list(first["clean"])
    attack_names = list(first["attacks"])
    grid = [float(e) for e in doc["epsilon_grid"]]
    clean = {}
    cells = {}
    for m in models:
        for d in defense_names:
            clean[(m, d)] = doc["models"][m]["clean"][d]
        for a in attack_names:
            for d in defense_names:
                for ek, v in doc["models"][m]["attacks"][a][d].items():
                    cells[(m, d, a, ek)] = v
    return SweepReport(grid, models, defense_names, attack_names, clean, cells,
                       doc["config_hash"], doc["data_fingerprint"], doc["master_seed"],
                       doc["test_sample_cap"], doc["repetitions"])


def _csv_for_model(report: SweepReport, model: str) -> str:
    header = "attack,defense,clean," + ",".join(
        f"eps_{report.eps_key(e)}" for e in report.epsilon_grid)
    lines = [header]
    for a in report.attack_names:
        for d in report.defense_names:
            vals = []
            for e in report.epsilon_grid:
                v = report.cell(model, d, a, e)
                vals.append("" if isinstance(v, dict) else f"{v:.6f}")
            c = report.clean[(model, d)]
            clean_txt = "" if isinstance(c, dict) else f"{c:.6f}"
            lines.append(f"{a},{d},{clean_txt}," + ",".join(vals))
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#e377c2", "#17becf")


def _svg_chart(report: SweepReport, model: str, attack: str) -> str:
    """Accuracy vs strength, one polyline per defense. No plotting deps."""
    width, height = 640, 420
    left, right, top, bottom = 60, 180, 30, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    xs = report.epsilon_grid
    x_max = max(xs) if xs else 1.0

    def px(eps):
        return left + plot_w * (eps / x_max)

    def py(acc):
        return top + plot_h * (1.0 - acc)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="14">'
        f'{model}: accuracy under {attack} attack</text>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#444"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + plot_w}" y2="{y:.1f}" '
                     f'stroke="#ddd"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{frac:.2f}</text>')
    for eps in xs:
        parts.append(f'<text x="{px(eps):.1f}" y="{height - bottom + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="9">{report.eps_key(eps)}</text>')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">attack strength</text>')

    for i, d in enumerate(report.defense_names):
        color = _PALETTE[i % len(_PALETTE)]
        points = []
        for e in xs:
            v = report.cell(model, d, attack, e)
            if isinstance(v, dict):
                continue
            points.append(f"{px(e):.1f},{py(v):.1f}")
        if points:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                         f'points="{" ".join(points)}"/>')
        ly = top + 16 * i + 10
        c = report.clean[(model, d)]
        label = f"{d} (clean {c:.2f})" if not isinstance(c, dict) else f"{d} (failed)"
        parts.append(f'<line x1="{left + plot_w + 10}" y1="{ly}" x2="{left + plot_w + 30}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w + 36}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: SweepReport, formats, out_dir) -> list[Path]:
    """Write the report files; re-emission is byte-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    formats = set(formats)
    unknown = formats - {"csv", "json", "svg"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    if "csv" in formats:
        for m in report.model_names:
            p = out_dir / f"report_{m}.csv"
            p.write_bytes(_csv_for_model(report, m).encode("utf-8"))
            written.append(p)
    if "json" in formats:
        p = out_dir / "report.json"
        p.write_bytes((json.dumps(_report_json(report), indent=2, sort_keys=True) + "\n").encode())
        written.append(p)
    if "svg" in formats:
        for m in report.model_names:
            for a in report.attack_names:
                p = out_dir / f"chart_{m}_{a}.svg"
                p.write_bytes(_svg_chart(report, m, a).encode("utf-8"))
                written.append(p)
    return written


def parse_report_csv(path) -> dict:
    """Read back an emitted CSV into {(attack, defense): {"clean": v, eps: v}}."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    if header[:3] != ["attack", "defense", "clean"]:
        raise ValueError(f"{path}: unexpected CSV header")
    eps_cols = [h.removeprefix("eps_") for h in header[3:]]
    out = {}
    for line in lines[1:]:
        fields = line.split(",")
        row = {"clean": float(fields[2]) if fields[2] else None}
        for ek, v in zip(eps_cols, fields[3:]):
            row[ek] = float(v) if v else None
        out[(fields[0], fields[1])] = row
    return out


def compare_reports(a: SweepReport, b: SweepReport, tolerance: float = 0.0) -> dict:
    """Per-cell deltas between two reports with matching schemas."""
    if set(a.cells) != set(b.cells):
        missing = set(a.cells) ^ set(b.cells)
        raise ValueError(f"report schemas differ; mismatched cells: {sorted(missing)[:5]}")
    deltas = {}
    violations = []
    max_delta = 0.0
    for key in a.cells:
        va, vb = a.cells[key], b.cells[key]
        if isinstance(va, dict) or isinstance(vb, dict):
            deltas[key] = None
            continue
        d = vb - va
        deltas[key] = d
        max_delta = max(max_delta, abs(d))
        if abs(d) > tolerance:
            violations.append((key, d))
    return {"max_abs_delta": max_delta, "deltas": deltas,
            "violations": violations, "tolerance": tolerance}
