"""Command-line entry point: ``mhmoe {plan,flops,train,eval,gradcheck,ablate,suite}``.

Exit codes: 0 success, 1 usage or configuration error, 2 invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import lm
from .layers import ACTIVATIONS, MoEConfig, init_params, layer_gradcheck, mhmoe_forward
from .parity import (
    InfeasiblePlanError, LegacyMHMoESpec, cost_report, count_legacy_mhmoe_ops, count_params,
    solve_parity, verify_parity,
)
from .tensor import DimensionError, OpCounter, Rng, Tensor, derive_seed

log = logging.getLogger("mhmoe")

DEFAULTS = {
    "seed": 0,
    "model": lm.default_config().to_dict(),
    "train": {"steps": 200, **{k: v for k, v in vars(lm.TrainHyper()).items() if k != "total_steps"}},
    "plan": {"h": 2, "k": 2, "rounding": "nearest", "B_grid": [1, 2, 8], "d_grid": [48, 96, 192, 768]},
    "flops": {"B": 2, "inject_fault": False},
    "eval": {"batch_size": 16},
    "gradcheck": {"d": 8, "h": 2, "d_expert": 6, "E": 4, "k": 2, "B": 3, "seeds": 3,
                  "shared_expert_dim": 5, "threshold": 1e-4},
    "suite": {"shared_expert": False, "bitnet": False},
    "legacy": {"h": 4, "beta": "63/64"},
}


class InvariantViolation(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; values parse as JSON, else as strings."""
    if "=" not in assignment:
        raise lm.ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = path.split(".")
    node = cfg
    for key in keys[:-1]:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
        if not isinstance(node, dict):
            raise lm.ConfigError(f"override {path!r} descends into a non-mapping")
    node[keys[-1]] = _parse_value(raw)


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise lm.ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for item in args.set or []:
        apply_override(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    cfg["model"]["seed"] = cfg["seed"]
    if cfg["model"].get("moe"):
        # spell out defaulted fields so the echoed config is complete
        cfg["model"]["moe"] = MoEConfig.from_dict(cfg["model"]["moe"]).to_dict()
    return cfg


def _moe(cfg: dict) -> MoEConfig:
    doc = cfg["model"].get("moe")
    if not doc:
        raise lm.ConfigError("model.moe must describe an MoE layer for this command")
    return MoEConfig.from_dict(doc)


def _hyper(cfg: dict) -> lm.TrainHyper:
    doc = dict(cfg["train"])
    steps = doc.pop("steps")
    doc.pop("resume", None)
    doc.setdefault("total_steps", steps)
    return lm.TrainHyper.from_dict(doc)


def _corpus(args) -> np.ndarray:
    data = lm.load_corpus(args.corpus) if args.corpus else lm.bundled_corpus()
    if len(data) < 2:
        raise lm.ConfigError(f"corpus {args.corpus or '<bundled>'} is empty")
    return data


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _report(out: Path, cfg: dict, payload: dict) -> None:
    _write(out, "report.json", json.dumps({"config": cfg, **payload}, indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_plan(cfg: dict, args) -> int:
    baseline = _moe(cfg)
    p = cfg["plan"]
    plan = solve_parity(baseline, int(p["h"]), int(p["k"]), p.get("rounding", "nearest"))
    check = verify_parity(plan, p["B_grid"], p["d_grid"])
    legacy_spec = LegacyMHMoESpec(int(cfg["legacy"]["h"]), Fraction(cfg["legacy"]["beta"]))
    payload = {"plan": plan.to_dict(), "verification": check.to_dict(),
               "legacy": count_legacy_mhmoe_ops(1, baseline.d, legacy_spec).to_dict()}
    print(json.dumps(payload["plan"], indent=2))
    print(plan.to_markdown())
    print(f"quadratic residual zero: {check.quadratic_zero}; linear residual: {check.linear_residual}Bd")
    for note in check.discrepancies:
        print(f"discrepancy: {note}")
    _report(args.out, cfg, payload)
    _write(args.out, "table.md", plan.to_markdown() + "\n")
    if not check.quadratic_zero:
        raise InvariantViolation("planned configuration does not cancel the d^2 term")
    return 0


def measure_ops(moe: MoEConfig, B: int, seed: int) -> int:
    """Instrumented forward pass of one layer; returns the counted multiplies plus adds."""
    rng = Rng(derive_seed(seed, "flops"))
    params = init_params(moe, rng, std=0.5)
    counter = OpCounter()
    mhmoe_forward(Tensor(rng.normal((B, moe.d))), params, moe, counter)
    return counter.paper_count


def cmd_flops(cfg: dict, args) -> int:
    moe = _moe(cfg)
    B = int(cfg["flops"]["B"])
    report = cost_report(moe, B)
    measured = measure_ops(moe, B, cfg["seed"])
    if cfg["flops"].get("inject_fault"):
        measured += 1
    print(json.dumps(report.to_dict(), indent=2))
    print(f"analytic/measured: {report.total_ops}/{measured}")
    _report(args.out, cfg, {"analytic": report.to_dict(), "measured": measured,
                            "match": report.total_ops == measured})
    if report.total_ops != measured:
        raise InvariantViolation(f"analytic count {report.total_ops} != measured {measured}")
    return 0


def cmd_train(cfg: dict, args) -> int:
    model_cfg = lm.ModelConfig.from_dict(cfg["model"])
    hyper = _hyper(cfg)
    train_data, val_data = lm.split_corpus(_corpus(args))
    ckpt = args.out / "checkpoint"
    if cfg["train"].get("resume") and (ckpt / "header.json").exists():
        # the saved schedule continues; --steps counts additional updates
        state, saved = lm.load_checkpoint(ckpt)
        hyper = saved or hyper
    else:
        state = lm.init_train_state(model_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    initial = lm.mean_nll(state.model, val_data)
    lm.train(state, train_data, cfg["train"]["steps"], hyper, metrics_path=args.out / "metrics.jsonl")
    final = lm.mean_nll(state.model, val_data)
    lm.save_checkpoint(state, ckpt, hyper)
    payload = {"step": state.step, "initial_val_loss": initial, "final_val_loss": final,
               "val_perplexity": float(np.exp(final)), "params": state.model.n_params()}
    print(json.dumps(payload, indent=2))
    _report(args.out, cfg, payload)
    return 0


def cmd_eval(cfg: dict, args) -> int:
    data = _corpus(args)
    ckpt = args.out / "checkpoint"
    if (ckpt / "header.json").exists():
        model = lm.load_checkpoint(ckpt)[0].model
    else:
        model = lm.build_model(lm.ModelConfig.from_dict(cfg["model"]))
    ppl = lm.evaluate_perplexity(model, data, int(cfg["eval"]["batch_size"]))
    print(f"perplexity: {ppl:.6f}")
    _report(args.out, cfg, {"perplexity": ppl, "bytes": int(len(data))})
    return 0


def gradcheck_variants(g: dict) -> list[MoEConfig]:
    out = []
    for activation in ACTIVATIONS:
        for shared in (None, g.get("shared_expert_dim")):
            for head in (False, True):
                for merge in (False, True):
                    out.append(MoEConfig(d=g["d"], h=g["h"], d_expert=g["d_expert"], E=g["E"], k=g["k"],
                                         activation=activation, use_head_layer=head, use_merge_layer=merge,
                                         shared_expert_dim=shared))
    return out


def cmd_gradcheck(cfg: dict, args) -> int:
    g = cfg["gradcheck"]
    rows, worst = [], 0.0
    for moe in gradcheck_variants(g):
        err = max(max(layer_gradcheck(moe, derive_seed(cfg["seed"], f"gradcheck{s}"), g["B"]).values())
                  for s in range(g["seeds"]))
        worst = max(worst, err)
        label = (f"{moe.activation} shared={moe.shared_expert_dim is not None} "
                 f"head={moe.use_head_layer} merge={moe.use_merge_layer}")
        rows.append({"variant": label, "max_rel_error": err})
        print(f"{label}: {err:.3e}")
    print(f"max relative error {worst:.3e} (threshold {g['threshold']})")
    _report(args.out, cfg, {"variants": rows, "max_rel_error": worst})
    if worst > g["threshold"]:
        raise InvariantViolation(f"gradient check error {worst:.3e} exceeds {g['threshold']}")
    return 0


ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))


def _mark(flag: bool) -> str:
    return "✓" if flag else "✗"


def cmd_ablate(cfg: dict, args) -> int:
    model_cfg = lm.ModelConfig.from_dict(cfg["model"])
    if model_cfg.moe is None:
        raise lm.ConfigError("ablation needs model.moe")
    hyper = _hyper(cfg)
    train_data, val_data = lm.split_corpus(_corpus(args))
    rows = []
    for head, merge in ABLATION_ROWS:
        moe = model_cfg.moe.with_(use_head_layer=head, use_merge_layer=merge)
        variant = lm.ModelConfig(**{**vars(model_cfg), "moe": moe})
        state = lm.init_train_state(variant)
        lm.train(state, train_data, cfg["train"]["steps"], hyper)
        rows.append({"head": head, "merge": merge, "val_ppl": lm.evaluate_perplexity(state.model, val_data),
                     "moe_ops_per_token": cost_report(moe, 1).total_ops, "moe_params": count_params(moe)})
    lines = ["| w/ head layer | w/ merge layer | val ppl | MoE ops/token | MoE params |", "|:-:|:-:|---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {_mark(r['head'])} | {_mark(r['merge'])} | {r['val_ppl']:.3f} | "
                     f"{r['moe_ops_per_token']} | {r['moe_params']} |")
    table = "\n".join(lines)
    print(table)
    _write(args.out, "table.md", table + "\n")
    _report(args.out, cfg, {"rows": rows})
    return 0


def cmd_suite(cfg: dict, args) -> int:
    base = lm.ModelConfig.from_dict(cfg["model"])
    s = cfg["suite"]
    result = lm.run_variant_suite(base, _corpus(args), cfg["train"]["steps"], _hyper(cfg),
                                  shared_expert=bool(s["shared_expert"]), bitnet=bool(s["bitnet"]))
    table = result.to_markdown()
    print(table)
    _write(args.out, "table.md", table + "\n")
    _report(args.out, cfg, {"rows": result.rows, "precheck": result.precheck})
    return 0


COMMANDS = {
    "plan": cmd_plan, "flops": cmd_flops, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "suite": cmd_suite,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mhmoe", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    parser.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--corpus", help="training / evaluation byte file (default: bundled corpus)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
        print(f"# resolved config written to {args.out / 'config.json'}", file=sys.stderr)
        return COMMANDS[args.command](cfg, args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except (lm.ConfigError, InfeasiblePlanError, DimensionError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
