"""Command-line front end: ``nim-hyper {solve,inverse,make-data,diagnose}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import tomli

from .discretization import ConfigurationError
from .experiments import (ConfigKeyError, InverseSpec, SolverFailure, config_from_dict, field_columns,
                          field_rows, generate_strain_data, run_forward, run_inverse,
                          evaluation_grid)
from .field import save_checkpoint
from .materials import InadmissibleStateError
from .optimizer import NonFiniteObjectiveError
from .residual import DataSchemaError, StrainDataSet, TestKind
from .rk_basis import SupportCoverageError

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------- io helpers

def _fmt(v) -> str:
    return format(float(v), ".17g")


def atomic_write(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(text: str):
    def w(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)
    return w


def _write_table(columns, rows):
    def w(tmp):
        with open(tmp, "w") as fh:
            fh.write(",".join(columns) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")
    return w


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _json(obj) -> str:
    # repr-level floats keep full round-trip precision
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def load_config_file(path, threads: int):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    ref = doc.get("reference", {}).get("path")
    if ref is not None and not Path(ref).is_absolute():
        doc["reference"]["path"] = str((path.parent / ref).resolve())
    cfg = config_from_dict(doc)
    return cfg.with_(threads=threads)


def resolve_threads(arg) -> int:
    if arg is not None:
        n = int(arg)
    elif os.environ.get("NIM_THREADS"):
        try:
            n = int(os.environ["NIM_THREADS"])
        except ValueError:
            raise ValidationError("NIM_THREADS must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValidationError("thread count must be >= 1")
    return n


# ---------------------------------------------------------------- artifacts

def write_solution(sol, out: Path, command: str, config_path, inverse: bool = False,
                   extra: dict | None = None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dim = sol.grid.shape[1]
    files = {}
    cols = field_columns(dim, inverse)
    atomic_write(out / "fields.csv", _write_table(cols, field_rows(sol.grid, sol.fields, inverse)))
    files["fields.csv"] = out / "fields.csv"

    def hist(tmp):
        sol.history.write_csv(tmp, extra_columns=("anchor_loss",))
    atomic_write(out / "history.csv", hist)
    files["history.csv"] = out / "history.csv"

    prob = sol.assembly.problem
    header = {"hidden": list(prob.displacement.mlp.hidden), "outputs": prob.displacement.mlp.n_out,
              "channels": prob.displacement.mlp.channels, "n_theta": prob.n_theta,
              "n_gamma": prob.n_params - prob.n_theta}
    if prob.modulus_field is not None:
        header["modulus_hidden"] = list(prob.modulus_field.mlp.hidden)
        header["modulus_outputs"] = prob.modulus_field.mlp.n_out
    atomic_write(out / "checkpoint.csv", lambda tmp: save_checkpoint(tmp, sol.params, header))
    files["checkpoint.csv"] = out / "checkpoint.csv"

    report = dict(sol.report)
    if extra:
        report.update(extra)
    atomic_write(out / "report.json", _write_text(_json(report)))
    files["report.json"] = out / "report.json"

    manifest = {
        "command": command,
        "config": str(config_path),
        "seed": sol.report.get("seed"),
        "output_dir": str(out),
        "artifacts": {name: _sha256(p) for name, p in files.items()},
    }
    atomic_write(out / "manifest.json", _write_text(_json(manifest)))
    return manifest


# ---------------------------------------------------------------- commands

def cmd_solve(args) -> int:
    cfg = load_config_file(args.config, resolve_threads(args.threads))
    if args.scheme:
        cfg = cfg.with_(scheme=TestKind(args.scheme))
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    sol = run_forward(cfg)
    write_solution(sol, args.out, "solve", args.config)
    _summary(sol)
    return EXIT_OK if sol.stop_reason.converged else EXIT_SOLVER


def _read_truth(data_path: Path):
    side = Path(str(data_path) + ".json")
    if not side.exists():
        return None, {}
    meta = json.loads(side.read_text())
    truth = meta.get("truth_fields")
    if truth and Path(truth).exists():
        arr = np.loadtxt(truth, delimiter=",", skiprows=1, ndmin=2)
        return arr, meta
    return None, meta


def cmd_inverse(args) -> int:
    cfg = load_config_file(args.config, resolve_threads(args.threads))
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    inv = cfg.inverse or InverseSpec()
    data_path = Path(args.data)
    if not data_path.exists():
        raise ValidationError(f"data file not found: {data_path}")
    try:
        data = StrainDataSet.read_csv(data_path, alpha=inv.alpha, dim=cfg.dim)
    except DataSchemaError as exc:
        raise ValidationError(f"{data_path}: {exc}") from None
    truth, meta = _read_truth(data_path)
    data.reactions = {k: list(v) for k, v in meta.get("reactions", {}).items()}
    truth_u = None
    if truth is not None:
        grid = evaluation_grid(cfg)
        if truth.shape[0] == len(grid):
            truth_u = truth[:, cfg.dim:cfg.dim + cfg.dim]
    sol = run_inverse(cfg.with_(inverse=inv), data, truth_u)
    write_solution(sol, args.out, "inverse", args.config, inverse=True)
    _summary(sol)
    return EXIT_OK if sol.stop_reason.converged else EXIT_SOLVER


def cmd_make_data(args) -> int:
    if args.ndata < 1:
        raise ValidationError("--ndata must be >= 1")
    cfg = load_config_file(args.config, resolve_threads(args.threads))
    data, truth = generate_strain_data(cfg, args.ndata, args.seed)
    out = Path(args.out)
    atomic_write(out, lambda tmp: data.write_csv(tmp))
    truth_path = Path(str(out) + ".truth.csv")
    dim = cfg.dim
    cols = ["X", "Y", "ux", "uy"][:2 * dim] if dim == 2 else ["X", "ux"]
    rows = np.column_stack([truth.grid, truth.fields["u"]])
    atomic_write(truth_path, _write_table(cols, rows))
    side = {
        "config": str(args.config),
        "n_data": args.ndata,
        "seed": args.seed,
        "reactions": truth.report["reactions"],
        "truth_report": {k: v for k, v in truth.report.items() if k not in ("config", "timings")},
        "truth_fields": str(truth_path),
        "sha256": _sha256(out),
    }
    atomic_write(Path(str(out) + ".json"), _write_text(_json(side)))
    print(f"wrote {args.ndata} rows to {out} (truth loss {truth.report['final_loss']:.3e})")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from . import diagnostics
    cfg = load_config_file(args.config, resolve_threads(args.threads))
    result = diagnostics.run_check(args.check, cfg)
    for k, v in result.items():
        print(f"{k}: {v}")
    if not result["passed"]:
        print(f"FAILED: worst offender {result.get('worst')}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _summary(sol) -> None:
    r = sol.report
    errs = ", ".join(f"{k}={v:.3e}" for k, v in r["errors"].items())
    print(f"{r['name']}: {r['stop_reason']} after {r['iterations']} iterations, "
          f"loss {r['final_loss']:.3e}" + (f", {errs}" if errs else ""))


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nim-hyper", description="Neural-integrated meshfree solver "
                                "for hyperelastic forward and inverse problems.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for shape-table construction (default: NIM_THREADS or CPU count)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run a forward problem")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scheme", choices=["h", "c"])
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("inverse", help="identify a modulus field from strain data")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_inverse)

    s = sub.add_parser("make-data", help="generate synthetic strain data from a truth solve")
    s.add_argument("--config", required=True)
    s.add_argument("--ndata", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("diagnose", help="run an invariant check suite")
    s.add_argument("--config", required=True)
    s.add_argument("--check", required=True, choices=["gradients", "patch", "reproduce"])
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigKeyError as exc:
        print(f"error: configuration key {exc.key!r}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, ConfigurationError, SupportCoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverFailure, InadmissibleStateError, NonFiniteObjectiveError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
