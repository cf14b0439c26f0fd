"""Command-line front end.

Subcommands::

    essa synth    --spec SPEC --out DIR
    essa adapt    --config CFG --out CKPT [--init CKPT] [--resume CKPT] [--log FILE] [--stop-at-epoch N]
    essa finetune --config CFG --out CKPT [--init CKPT] [--resume CKPT] [--log FILE] [--stop-at-epoch N]
    essa ttt      --config CFG --out CKPT --init CKPT [--resume CKPT] [--log FILE] [--stop-at-epoch N]
    essa eval     --ckpt CKPT --config CFG [--protocol knn|head] [--log FILE]
    essa report   --logs DIR --out CSV

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 data/format
error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

from essa import checkpoint as ck
from essa import data as ds
from essa.config import _convert, _parse_sections, load_config
from essa.errors import ConfigError, ContractError, DataError, DomainError, EssaError, ShapeError
from essa.evaluation import compute_metric, evaluate_knn_protocol
from essa.pipeline import foundation_model, predict, run_essa, run_sa, run_ttt

EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 1, 2, 3, 4
REPORT_COLUMNS = ("adapter", "stage", "epochs", "final_loss", "final_metric", "metric_name", "trainable_count",
                  "trainable_fraction", "optimizer_state_bytes", "mean_steps_per_sec")


# ---------------------------------------------------------------------------
# synth


def read_synth_spec(path) -> ds.SynthSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    sections = _parse_sections(text, str(path))
    unknown = set(sections) - {"synth"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}; expected [synth]")
    kinds = {}
    for f in fields(ds.SynthSpec):
        kinds[f.name] = {"int": int, "float": float}.get(f.type, "floats")
    values = {}
    for key, (raw, lineno) in sections.get("synth", {}).items():
        where = f"{path}:{lineno}"
        if key not in kinds:
            raise ConfigError(f"{where}: unknown key {key!r} in [synth]")
        if kinds[key] == "floats":
            try:
                values[key] = tuple(float(p) for p in raw.split(","))
            except ValueError:
                raise ConfigError(f"{where}: cannot read {raw!r} as a list of numbers") from None
        else:
            values[key] = _convert(kinds[key], raw, where)
    try:
        return ds.SynthSpec(**values)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_synth(args) -> int:
    spec = read_synth_spec(args.spec)
    paths = ds.write_all(spec, args.out, args.name)
    for (split, domain), path in paths.items():
        n = spec.split_size(split)
        print(f"{path.name}: {n} images, {path.stat().st_size} bytes")
    if spec.shift_strength == 0.0:
        same = all(paths[(s, "source")].read_bytes() == paths[(s, "target")].read_bytes() for s in ds.SPLITS)
        state = "byte-identical to" if same else "DIFFERENT from"
        print(f"warning: shift_strength=0, target files are {state} source files", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# training stages


def _dataset(cfg, key: str) -> ds.Dataset:
    return ds.load(cfg.data_path(key))


def _append_log(path, record: dict) -> None:
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _check_preset(cfg, model, what: str) -> None:
    if model.config != cfg.vit:
        raise ConfigError(f"{what} was built for a different model ({model.config}) than preset {cfg.preset!r}")


def _resume_state(args, cfg, stage: str):
    if args.resume is None:
        return None
    state = ck.state_from_checkpoint(ck.load(args.resume))
    _check_preset(cfg, state.model, f"resume checkpoint {args.resume}")
    if state.stage != stage:
        raise ConfigError(f"resume checkpoint {args.resume} is from stage {state.stage!r}, not {stage!r}")
    return state


def _initial_model(args, cfg):
    if args.init is None:
        return foundation_model(cfg.vit, cfg.seed), None
    model, head = ck.model_from_checkpoint(ck.load(args.init))
    _check_preset(cfg, model, f"init checkpoint {args.init}")
    return model, head


def _finish(args, state) -> int:
    ck.save(ck.state_checkpoint(state), args.out)
    last = state.log[-1] if state.log else {}
    print(json.dumps({"stage": state.stage, "epoch": state.epoch, "loss": last.get("loss"), "out": str(args.out)}))
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    images = _dataset(cfg, "essa").images
    state = _resume_state(args, cfg, "essa")
    model = None if state else _initial_model(args, cfg)[0]
    state = run_essa(model, cfg.adapter("essa"), images, cfg.stage("essa"), state=state,
                     stop_at_epoch=args.stop_at_epoch, on_epoch=lambda r: _append_log(args.log, r))
    return _finish(args, state)


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    dataset = _dataset(cfg, "sa")
    state = _resume_state(args, cfg, "sa")
    model = None if state else _initial_model(args, cfg)[0]
    state = run_sa(model, dataset.images, dataset.require_labels(), cfg.stage("sa"), spec=cfg.adapter("sa"),
                   state=state, stop_at_epoch=args.stop_at_epoch, on_epoch=lambda r: _append_log(args.log, r))
    return _finish(args, state)


def cmd_ttt(args) -> int:
    cfg = load_config(args.config)
    images = _dataset(cfg, "ttt").images
    state = _resume_state(args, cfg, "ttt")
    model = head = None
    if state is None:
        if args.init is None:
            raise ContractError("ttt needs --init with a trained prediction head")
        model, head = _initial_model(args, cfg)
    state = run_ttt(model, head, images, cfg.adapter("ttt"), cfg.stage("ttt"), state=state,
                    stop_at_epoch=args.stop_at_epoch, on_epoch=lambda r: _append_log(args.log, r))
    return _finish(args, state)


# ---------------------------------------------------------------------------
# eval and report


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = ck.load(args.ckpt)
    model, head = ck.model_from_checkpoint(ckpt)
    _check_preset(cfg, model, f"checkpoint {args.ckpt}")
    query = _dataset(cfg, "eval_query")
    labels = query.require_labels()
    if args.protocol == "knn":
        gallery = _dataset(cfg, "eval_gallery")
        value = evaluate_knn_protocol(model, gallery.images, gallery.require_labels(), query.images, labels,
                                      k=cfg.eval.k, tau=cfg.eval.tau, metric=cfg.eval.metric)
    else:
        if not head:
            raise ContractError("head protocol needs a checkpoint with a trained prediction head")
        pred, probs = predict(model, head, query.images)
        value = compute_metric(cfg.eval.metric, labels, pred, probs, probs.shape[1])
    meta = ckpt.meta
    adapter = meta["spec"]["kind"] if "spec" in meta else "none"
    record = {"stage": "eval", "of_stage": meta.get("stage", "model"), "adapter": adapter,
              "protocol": args.protocol, "metric": cfg.eval.metric, "value": value}
    print(json.dumps(record, sort_keys=True))
    _append_log(args.log, record)
    return 0


def _read_logs(directory) -> list[tuple[str, int, dict]]:
    directory = Path(directory)
    files = sorted(directory.glob("*.jsonl"))
    if not files:
        raise DataError(f"no *.jsonl metric logs in {directory}")
    records = []
    for path in files:
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "stage" not in rec:
                    raise ValueError("not a metric record")
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed log line ({exc})") from None
            records.append((str(path), lineno, rec))
    return records


def build_report(records) -> list[dict]:
    rows: dict[tuple[str, str], dict] = {}
    evals = []
    for path, lineno, rec in records:
        if rec["stage"] == "eval":
            evals.append(rec)
            continue
        try:
            key = (rec["adapter"], rec["stage"])
            row = rows.setdefault(key, {"adapter": key[0], "stage": key[1], "epochs": 0, "speeds": []})
            row["epochs"] += 1
            row["final_loss"] = rec["loss"]
            row["trainable_count"] = rec["trainable_count"]
            row["trainable_fraction"] = rec["trainable_fraction"]
            row["optimizer_state_bytes"] = rec["optimizer_state_bytes"]
            row["speeds"].append(rec["steps_per_sec"])
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: log record lacks field {exc}") from None
    for rec in evals:
        row = rows.get((rec.get("adapter"), rec.get("of_stage")))
        if row is not None:
            row["final_metric"] = rec["value"]
            row["metric_name"] = rec["metric"]
    out = []
    for row in rows.values():
        speeds = row.pop("speeds")
        row["mean_steps_per_sec"] = sum(speeds) / len(speeds)
        out.append({c: row.get(c, "") for c in REPORT_COLUMNS})
    return out


def cmd_report(args) -> int:
    rows = build_report(_read_logs(args.logs))
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(rows)} row(s) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="essa", description="Efficient self-supervised adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the six synthetic dataset files")
    p.add_argument("--spec", required=True, help="file with a [synth] section")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="synth", help="file name prefix (default: synth)")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (
        ("adapt", cmd_adapt, "self-supervised adaptation on [data] essa"),
        ("finetune", cmd_finetune, "supervised adaptation on [data] sa"),
        ("ttt", cmd_ttt, "test-time training on [data] ttt"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True, help="checkpoint to write")
        p.add_argument("--init", help="checkpoint providing the starting model (and head)")
        p.add_argument("--resume", help="checkpoint of an interrupted run of this stage")
        p.add_argument("--log", help="JSON-lines file to append per-epoch records to")
        p.add_argument("--stop-at-epoch", type=int, help="stop after this many completed epochs")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--protocol", choices=("knn", "head"), default="knn")
    p.add_argument("--log", help="JSON-lines file to append the result to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate metric logs into a CSV")
    p.add_argument("--logs", required=True, help="directory of *.jsonl logs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, ShapeError, DomainError, EssaError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
