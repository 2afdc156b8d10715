"""Command-line pipeline: generate | train | predict | evaluate.

Every command reads an optional flat key-value config file (``key = value``
lines, ``#`` comments) with command-line flags taking precedence, and writes
a resolved-config copy next to its primary output so any run can be replayed
exactly.  All randomness is surfaced as seeds in the config; rerunning a
command with the same resolved config yields bit-identical files.

Exit codes: 0 success, 2 validation error (bad arguments, files, or
schemas), 3 numerical failure (non-converged solve, failed training).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, evaluation, potentials, solver, training
from .mandel import SymTensor2
from .refmat import RefMaterialParams
from .solver import MaterialState, SolverConfig, SolverError

_REF_KEYS = tuple(f.name for f in dataclasses.fields(RefMaterialParams))


# ---------------------------------------------------------------------------
# flat config files and option resolution
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Field:
    """One resolvable option: config key, type tag, default, requiredness."""

    name: str
    kind: str  # "int" | "float" | "str" | "bool"
    default: object = None
    required: bool = False
    help: str = ""


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into a string-to-string mapping."""
    text = Path(path).read_text(encoding="utf-8")
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_value(field: Field, raw: str):
    if field.kind == "int":
        return int(raw)
    if field.kind == "float":
        return float(raw)
    if field.kind == "bool":
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"{field.name} must be 'true' or 'false', got {raw!r}")
        return low == "true"
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_options(fields, args, config_path) -> dict:
    """Merge CLI arguments over config-file values over declared defaults."""
    file_values = read_config(config_path) if config_path else {}
    known = {f.name for f in fields}
    unknown = set(file_values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for field in fields:
        cli = getattr(args, field.name, None)
        if cli is not None:
            resolved[field.name] = cli
        elif field.name in file_values:
            resolved[field.name] = _parse_value(field, file_values[field.name])
        else:
            resolved[field.name] = field.default
        if field.required and resolved[field.name] is None:
            raise ValueError(f"missing required option {field.name!r}")
    return resolved


def write_resolved_config(primary_output, resolved: dict) -> None:
    """Persist the effective options next to the command's main artifact."""
    lines = [
        f"{key} = {_format_value(value)}"
        for key, value in sorted(resolved.items())
        if value is not None
    ]
    Path(str(primary_output) + ".config").write_text(
        "\n".join(lines) + "\n", encoding="utf-8"
    )


def _add_flags(parser: argparse.ArgumentParser, fields) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for field in fields:
        flag = "--" + field.name.replace("_", "-")
        if field.kind == "bool":
            parser.add_argument(
                flag, action=argparse.BooleanOptionalAction, default=None,
                help=field.help,
            )
        else:
            typ = {"int": int, "float": float, "str": str}[field.kind]
            parser.add_argument(flag, type=typ, default=None, help=field.help)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_FIELDS = (
    Field("out", "str", required=True, help="dataset file to write"),
    Field("sequences", "int", 1, help="number of strain paths"),
    Field("steps", "int", 200, help="time steps per path"),
    Field("seed", "int", 0, help="base seed; path i draws from seed + i"),
    Field("noise", "float", 0.0, help="stress noise std in MPa (0 = ideal)"),
    Field("noise_seed", "int", None, help="noise stream seed (default: seed)"),
    Field("plane_strain", "bool", False, help="zero the out-of-plane strains"),
) + tuple(
    Field(name, "float", None, help="reference material override (MPa / MPa s)")
    for name in _REF_KEYS
)


def cmd_generate(args) -> int:
    opts = resolve_options(GENERATE_FIELDS, args, args.config)
    overrides = {k: opts[k] for k in _REF_KEYS if opts[k] is not None}
    ref = RefMaterialParams.from_mapping(overrides)
    cfg = datagen.PathConfig(
        steps=opts["steps"], plane_strain=opts["plane_strain"], seed=opts["seed"]
    )
    ds = datagen.generate_dataset(cfg, opts["sequences"], ref)
    if opts["noise"] > 0.0:
        noise_seed = opts["noise_seed"] if opts["noise_seed"] is not None else opts["seed"]
        ds = datagen.add_noise(ds, opts["noise"], noise_seed)
    datagen.save_dataset(ds, opts["out"])
    for key in _REF_KEYS:  # record the effective material, not just overrides
        opts[key] = getattr(ref, key)
    write_resolved_config(opts["out"], opts)
    print(
        f"wrote {opts['out']}: {len(ds.sequences)} sequence(s) x "
        f"{opts['steps']} steps, noise={ds.noise}, domain={ds.domain}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_FIELDS = (
    Field("data", "str", required=True, help="training dataset file"),
    Field("out", "str", required=True, help="checkpoint file to write"),
    Field("report", "str", help="report file (default: <out stem>.report.json)"),
    Field("method", "str", "aux_rnn", help="given_q | aux_fnn | aux_rnn | integration"),
    Field("mode", "str", "invariant", help="invariant | coordinate"),
    Field("epochs", "int", 2000),
    Field("learning_rate", "float", 0.01),
    Field("decay", "float", 0.5),
    Field("decay_interval", "int", 500),
    Field("restarts", "int", 3),
    Field("seed", "int", 0),
    Field("pretrain_epochs", "int", 500),
    Field("tolerance", "float", None, help="training-time solver tolerance (MPa)"),
    Field("max_iterations", "int", None, help="training-time solver iteration cap"),
)


def _solver_config(opts) -> SolverConfig | None:
    picked = {
        key: opts[key]
        for key in ("tolerance", "max_iterations")
        if opts[key] is not None
    }
    return SolverConfig(**picked) if picked else None


def cmd_train(args) -> int:
    opts = resolve_options(TRAIN_FIELDS, args, args.config)
    if opts["mode"] not in potentials.MODES:
        raise ValueError(
            f"unknown mode {opts['mode']!r}; expected one of {potentials.MODES}"
        )
    if opts["report"] is None:
        opts["report"] = str(Path(opts["out"]).with_suffix(".report.json"))
    dataset = datagen.load_dataset(opts["data"])
    cfg = training.TrainConfig(
        method=opts["method"],
        epochs=opts["epochs"],
        learning_rate=opts["learning_rate"],
        decay=opts["decay"],
        decay_interval=opts["decay_interval"],
        restarts=opts["restarts"],
        seed=opts["seed"],
        solver=_solver_config(opts),
        pretrain_epochs=opts["pretrain_epochs"],
    )
    tic = time.perf_counter()
    report = training.train(opts["mode"], dataset, cfg)
    wall = time.perf_counter() - tic
    potentials.save_checkpoint(report.model, opts["out"])
    payload = training.report_to_payload(report, include_times=False)
    payload["mode"] = opts["mode"]
    with open(opts["report"], "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    write_resolved_config(opts["out"], opts)
    print(
        f"wrote {opts['out']}: method={report.method} mode={opts['mode']} "
        f"final_loss={report.final_loss:.6g} restart={report.restart_index} "
        f"({wall:.1f} s)"
    )
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

PREDICT_FIELDS = (
    Field("checkpoint", "str", required=True, help="trained model file"),
    Field("path", "str", required=True, help="dataset file with strain paths"),
    Field("out", "str", required=True, help="response file to write"),
    Field("tolerance", "float", None, help="solver tolerance (MPa)"),
    Field("max_iterations", "int", None, help="solver iteration cap"),
)


def _integrate(model, seq, cfg):
    """One sequence's response with per-step solver diagnostics."""
    state = MaterialState.rest(t=float(seq.t[0]))
    sig = [np.zeros(6)]
    q = [np.zeros(6)]
    residuals = [0.0]
    iterations = [0]
    for n in range(1, seq.t.size):
        dt = float(seq.t[n] - seq.t[n - 1])
        try:
            result = solver.step(model, state, SymTensor2(seq.eps[n]), dt, cfg)
        except SolverError as err:
            raise err.with_step(n) from None
        state = result.state
        sig.append(state.sig.m)
        q.append(state.q.m)
        residuals.append(result.residual_norm)
        iterations.append(result.iterations)
    return {
        "t": seq.t.tolist(),
        "eps": seq.eps.tolist(),
        "sig": np.stack(sig).tolist(),
        "q": np.stack(q).tolist(),
        "residual_norms": [float(r) for r in residuals],
        "iterations": [int(i) for i in iterations],
    }


def cmd_predict(args) -> int:
    opts = resolve_options(PREDICT_FIELDS, args, args.config)
    model = potentials.load_checkpoint(opts["checkpoint"])
    paths = datagen.load_dataset(opts["path"])
    cfg = _solver_config(opts)
    entries = []
    for k, seq in enumerate(paths.sequences):
        try:
            entries.append(_integrate(model, seq, cfg))
        except SolverError as err:
            raise SolverError(
                f"sequence {k}: time step failed",
                iterations=err.iterations,
                residual_norm=err.residual_norm,
                best_qdot=err.best_qdot,
                step_index=err.step_index,
            ) from None
    payload = {"schema": evaluation.RESP_SCHEMA, "mode": model.mode, "sequences": entries}
    with open(opts["out"], "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    write_resolved_config(opts["out"], opts)
    n_steps = sum(len(e["t"]) - 1 for e in entries)
    worst = max(max(e["residual_norms"]) for e in entries)
    print(
        f"wrote {opts['out']}: {len(entries)} sequence(s), {n_steps} steps, "
        f"max residual {worst:.3e} MPa"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

EVALUATE_FIELDS = (
    Field("response", "str", required=True, help="response file from predict"),
    Field("reference", "str", required=True, help="dataset file with reference stress"),
    Field("metrics", "str", help="metrics file (default: <response stem>.metrics.json)"),
    Field("csv", "str", help="correlation table (default: <response stem>.correlation.csv)"),
    Field(
        "noisy_reference", "bool", False,
        help="score against the noiseless ground-truth channel when present",
    ),
)


def _load_response(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if not isinstance(payload, dict) or payload.get("schema") != evaluation.RESP_SCHEMA:
        got = payload.get("schema") if isinstance(payload, dict) else None
        raise ValueError(
            f"expected response schema {evaluation.RESP_SCHEMA!r}, got {got!r}"
        )
    out = []
    for entry in payload["sequences"]:
        out.append(
            (
                np.asarray(entry["t"], dtype=np.float64),
                np.asarray(entry["sig"], dtype=np.float64),
            )
        )
    return out


def cmd_evaluate(args) -> int:
    opts = resolve_options(EVALUATE_FIELDS, args, args.config)
    if opts["metrics"] is None:
        opts["metrics"] = str(Path(opts["response"]).with_suffix(".metrics.json"))
    if opts["csv"] is None:
        opts["csv"] = str(Path(opts["response"]).with_suffix(".correlation.csv"))
    predicted = _load_response(opts["response"])
    reference = datagen.load_dataset(opts["reference"])
    if len(predicted) != len(reference.sequences):
        raise ValueError(
            f"response has {len(predicted)} sequence(s) but the reference "
            f"has {len(reference.sequences)}"
        )
    pred_blocks = []
    ref_blocks = []
    for k, ((t, sig_pred), seq) in enumerate(zip(predicted, reference.sequences)):
        if not np.array_equal(t, seq.t):
            raise ValueError(f"sequence {k}: response and reference time grids differ")
        ref_sig = seq.sig
        if opts["noisy_reference"] and seq.sig_ideal is not None:
            ref_sig = seq.sig_ideal
        if ref_sig is None:
            raise ValueError(f"sequence {k}: reference has no stress labels")
        pred_blocks.append(sig_pred)
        ref_blocks.append(ref_sig)
    metrics = evaluation.compute_metrics(pred_blocks, ref_blocks)
    with open(opts["metrics"], "w", encoding="utf-8") as f:
        json.dump(evaluation.metrics_to_payload(metrics), f, indent=1)
        f.write("\n")
    evaluation.write_correlation_csv(
        opts["csv"], evaluation.correlation_rows(pred_blocks, ref_blocks)
    )
    write_resolved_config(opts["metrics"], opts)
    print(
        f"wrote {opts['metrics']}: MAE {metrics.mae_mpa:.4g} MPa "
        f"(normalized {metrics.mae_norm:.4g}), R^2 {metrics.r2:.6f}"
    )
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsmnet",
        description="Neural two-potential viscoelasticity: data, training, prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fields, fn, blurb in (
        ("generate", GENERATE_FIELDS, cmd_generate, "sample and label strain paths"),
        ("train", TRAIN_FIELDS, cmd_train, "calibrate a model on a dataset"),
        ("predict", PREDICT_FIELDS, cmd_predict, "integrate strain paths with a model"),
        ("evaluate", EVALUATE_FIELDS, cmd_evaluate, "score a response against reference data"),
    ):
        p = sub.add_parser(name, help=blurb)
        _add_flags(p, fields)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (SolverError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
