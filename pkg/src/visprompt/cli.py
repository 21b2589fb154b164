"""Single executable surface: dataset synthesis, noise injection, training,
evaluation, partitioning, gradient checking, theory verification and sweeps.

Exit codes: 0 success, 1 rejected input or a failed check, 2 internal error.
All randomness flows from seeds in the effective configuration; identical
invocations produce byte-identical output files.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import gradcheck
from . import pipeline as P
from . import theory as TH
from . import train as T
from . import transport
from .errors import VisPromptError
from .losses import LossConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# Config-driven construction helpers
# ---------------------------------------------------------------------------

def _dims(cfg: dict) -> P.ModelDims:
    return P.ModelDims(embed_dim=cfg["embed_dim"], visual_dim=cfg["visual_dim"],
                       shared_dim=cfg["shared_dim"], n_ctx=cfg["n_ctx"],
                       heads=cfg["heads"])


def _train_config(cfg: dict, seed: int) -> T.TrainConfig:
    return T.TrainConfig(
        lr0=cfg["lr0"], epochs=cfg["epochs"], batch=cfg["batch"],
        warmup_epochs=cfg["warmup_epochs"],
        partition_refresh=cfg["partition_refresh"],
        variant=cfg["variant"], routing=cfg["routing"],
        loss=LossConfig(q=cfg["q"], alpha_mode=cfg["alpha_mode"],
                        alpha_value=cfg["alpha_value"]),
        epsilon=cfg["epsilon"], sinkhorn_tol=cfg["sinkhorn_tol"],
        sinkhorn_max_iters=cfg["sinkhorn_max_iters"],
        delta_rel=cfg["delta_rel"], delta_abs=cfg["delta_abs"],
        ctx_mode=cfg["ctx_mode"], tau=cfg["tau"],
        align_noise=cfg["align_noise"], dims=_dims(cfg), seed=seed)


NOISE_SEED_OFFSET = 9973
TEST_SEED_OFFSET = 1000


def _synthetic_train(cfg: dict, noise_rate: float | None = None,
                     noise_type: str | None = None) -> D.FeatureDataset:
    spec = D.SyntheticSpec(
        n_classes=cfg["n_classes"], samples_per_class=cfg["shots"],
        n_tokens=cfg["n_tokens"], token_dim=cfg["token_dim"],
        eps_v=cfg["eps_v"], n_informative=cfg["n_informative"],
        margin_scale=cfg["margin_scale"], seed=cfg["data_seed"])
    ds = D.generate_synthetic(spec)
    rate = cfg["noise_rate"] if noise_rate is None else noise_rate
    kind = cfg["noise_type"] if noise_type is None else noise_type
    if rate > 0:
        inject = (D.inject_symmetric_noise if kind == "sym"
                  else D.inject_asymmetric_noise)
        ds = inject(ds, rate, seed=cfg["data_seed"] + NOISE_SEED_OFFSET)
    return ds


def _synthetic_test(cfg: dict) -> D.FeatureDataset:
    spec = D.SyntheticSpec(
        n_classes=cfg["n_classes"], samples_per_class=cfg["test_per_class"],
        n_tokens=cfg["n_tokens"], token_dim=cfg["token_dim"],
        eps_v=cfg["eps_v"], n_informative=cfg["n_informative"],
        margin_scale=cfg["margin_scale"],
        seed=cfg["data_seed"] + TEST_SEED_OFFSET,
        prototype_seed=cfg["data_seed"])
    return D.generate_synthetic(spec)


def _load_datasets(cfg: dict, data: str | None, test_data: str | None
                   ) -> tuple[D.FeatureDataset, D.FeatureDataset]:
    data = data or cfg["data"]
    test_data = test_data or cfg["test_data"]
    train_ds = D.load_features(data) if data else _synthetic_train(cfg)
    test_ds = (D.load_features(test_data) if test_data
               else _synthetic_test(cfg))
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# Model checkpoint helpers (train writes, eval reads)
# ---------------------------------------------------------------------------

def _save_model(path, state: T.TrainState, variant: str) -> None:
    arrays = {f"param_{k}": v
              for k, v in P.trainable_arrays(state.ctx, state.params).items()}
    np.savez(path, variant=variant, ctx_mode=state.ctx.mode,
             heads=state.params.heads, tau=state.enc.tau,
             enc_seed=state.enc.seed, class_embed=state.enc.class_embed,
             text_proj=state.enc.text_proj, image_proj=state.enc.image_proj,
             **arrays)


def _load_model(path) -> tuple[T.TrainState, str]:
    with np.load(path, allow_pickle=False) as blob:
        ctx = P.ContextBank(mode=str(blob["ctx_mode"]),
                            tokens=blob["param_ctx_tokens"])
        fields = {name: blob[f"param_{name}"]
                  for name in P.TRAINABLE_PARAM_FIELDS}
        params = P.PipelineParams(heads=int(blob["heads"]), **fields)
        enc = P.FrozenEncoders(class_embed=blob["class_embed"],
                               text_proj=blob["text_proj"],
                               image_proj=blob["image_proj"],
                               tau=float(blob["tau"]),
                               seed=int(blob["enc_seed"]))
        variant = str(blob["variant"])
    state = T.TrainState(ctx=ctx, params=params, enc=enc,
                         rng=np.random.default_rng(0))
    return state, variant


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_metrics_csv(path, records: list[T.MetricsRecord]) -> None:
    lines = ["epoch,lr,train_loss,test_acc,reliable_count,partition_precision"]
    for r in records:
        prec = "" if r.partition_precision is None else _fmt(r.partition_precision)
        lines.append(f"{r.epoch},{_fmt(r.lr)},{_fmt(r.train_loss)},"
                     f"{_fmt(r.test_accuracy)},{r.reliable_count},{prec}")
    Path(path).write_text("\n".join(lines) + "\n")


def _write_results_csv(path, rows: list[tuple]) -> None:
    lines = ["dataset,variant,noise_type,noise_rate,seed,accuracy"]
    for dataset, variant, noise_type, rate, seed, acc in rows:
        lines.append(f"{dataset},{variant},{noise_type},{_fmt(rate)},"
                     f"{seed},{_fmt(acc)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = D.SyntheticSpec(
        n_classes=args.classes, samples_per_class=args.shots,
        n_tokens=args.tokens, token_dim=args.dim, eps_v=args.eps_v,
        n_informative=args.informative, margin_scale=args.margin_scale,
        seed=args.seed, prototype_seed=args.prototype_seed)
    ds = D.generate_synthetic(spec)
    D.save_features(ds, args.out)
    print(f"wrote {args.out}: {ds.n_samples} samples, "
          f"{ds.n_classes} classes, {ds.n_tokens}x{ds.token_dim} tokens")
    return 0


def _cmd_noise(args) -> int:
    ds = D.load_features(args.in_path)
    inject = (D.inject_symmetric_noise if args.type == "sym"
              else D.inject_asymmetric_noise)
    noisy = inject(ds, args.rate, seed=args.seed)
    D.save_features(noisy, args.out)
    print(f"wrote {args.out}: {int(noisy.noise_mask.sum())} of "
          f"{noisy.n_samples} labels flipped")
    return 0


def _overrides_from(args, keys) -> dict:
    out = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _cmd_train(args) -> int:
    overrides = _overrides_from(
        args, ("epochs", "variant", "routing", "noise_rate", "seed"))
    if args.seeds is not None:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    cfg = C.load_config(args.config, overrides)
    train_ds, test_ds = _load_datasets(cfg, args.data, args.test_data)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.write_effective_config(cfg, out_dir)

    report = T.run_experiment(_train_config(cfg, cfg["seeds"][0]),
                              train_ds, test_ds, cfg["seeds"])
    first = cfg["seeds"][0]
    _write_metrics_csv(out_dir / "metrics.csv", report.metrics[first])
    for seed in cfg["seeds"][1:]:
        _write_metrics_csv(out_dir / f"metrics_seed{seed}.csv",
                           report.metrics[seed])
    _save_model(out_dir / "model.npz", report.states[first], cfg["variant"])

    total = report.trainable_params + report.frozen_params
    _write_json(out_dir / "report.json", {
        "final_accuracy": {
            "mean": report.accuracy_mean,
            "std": report.accuracy_std,
            "per_seed": {str(k): v for k, v in report.per_seed_accuracy.items()},
        },
        "parameters": {
            "trainable": report.trainable_params,
            "frozen": report.frozen_params,
            "trainable_fraction": report.trainable_params / total,
        },
    })
    print(f"final accuracy {report.accuracy_mean:.4f} "
          f"± {report.accuracy_std:.4f} over seeds {cfg['seeds']}")
    return 0


def _cmd_eval(args) -> int:
    state, variant = _load_model(args.model)
    ds = D.load_features(args.data)
    acc = T.evaluate_accuracy(state, ds, variant)
    payload = {"accuracy": acc, "n_samples": ds.n_samples, "variant": variant}
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        _write_json(args.out, payload)
    return 0


def _cmd_partition(args) -> int:
    cfg = C.load_config(args.config, _overrides_from(args, ("seed",)))
    train_ds, _ = _load_datasets(cfg, args.data, None)
    tc = _train_config(cfg, cfg["seed"])
    state = T.init_state(tc, train_ds.n_classes,
                         D.estimate_class_directions(train_ds))
    result, plan = transport.partition_from_features(
        T.base_text_features(state),
        T.frozen_image_features(train_ds, state.enc),
        train_ds.observed_labels, tau=tc.tau, epsilon=tc.epsilon,
        delta_rel=tc.delta_rel, delta_abs=tc.delta_abs,
        max_iters=tc.sinkhorn_max_iters, tol=tc.sinkhorn_tol)
    payload = {
        "pseudo_labels": result.pseudo_labels.tolist(),
        "confidences": result.confidences.tolist(),
        "reliable": result.reliable.tolist(),
        "unreliable": result.unreliable.tolist(),
        "delta": result.delta,
        "marginal_violation": plan.marginal_violation,
    }
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out}: {result.reliable.size} reliable / "
              f"{result.unreliable.size} unreliable")
    else:
        print(json.dumps(payload, sort_keys=True))
    return 0


GRADCHECK_TOLERANCE = 1e-5


def _cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + 5)
    worst = 0.0
    for variant in P.VARIANTS:
        err = gradcheck.max_gradient_error(variant, seeds=list(seeds))
        print(f"{variant:16s} max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"overall max relative error {worst:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def _cmd_verify_theory(args) -> int:
    deltas = [float(x) for x in args.grid_delta.split(",")]
    eps_grid = [float(x) for x in args.grid_epsv.split(",")]
    grid_seeds = list(range(args.seed, args.seed + args.grid_seeds))

    rng = np.random.default_rng(args.seed)
    tail_checks = []
    for _ in range(args.tail_vectors):
        m = int(rng.integers(4, 12))
        scores = rng.normal(0.0, 2.0, m)
        idx = rng.choice(m, int(rng.integers(1, m)), replace=False)
        measured, bound, holds = TH.irrelevant_mass_bound_check(scores, idx)
        tail_checks.append(holds)
    tail_ok = all(tail_checks)

    dev_margin = TH.deviation_over_margins(deltas, args.eps_v, grid_seeds)
    margin_ok = all(a > b for a, b in zip(dev_margin, dev_margin[1:]))
    dev_eps = TH.deviation_over_dispersion(args.delta, eps_grid, grid_seeds)
    eps_ok = all(a <= b for a, b in zip(dev_eps, dev_eps[1:]))

    held, preserved = TH.margin_preservation_survey(
        args.instances, seed0=args.seed)
    preservation_ok = held == args.instances and preserved == held

    ref = TH.build_theory_problem(args.delta, args.eps_v, args.seed)
    l_mod, l_head = TH.estimate_lipschitz_constants(ref)

    report = {
        "tail_bound": {"vectors": args.tail_vectors, "holds": tail_ok},
        "deviation_vs_margin": {
            "grid": deltas, "means": dev_margin,
            "strictly_decreasing": margin_ok},
        "deviation_vs_dispersion": {
            "grid": eps_grid, "means": dev_eps, "non_decreasing": eps_ok},
        "margin_preservation": {
            "premise_held": held, "preserved": preserved,
            "all_preserved": preservation_ok},
        "lipschitz_estimates": {"modulation": l_mod, "head": l_head},
        "passed": tail_ok and margin_ok and eps_ok and preservation_ok,
    }
    if args.out:
        _write_json(args.out, report)
    for name, ok in (("tail-bound", tail_ok), ("margin-trend", margin_ok),
                     ("dispersion-trend", eps_ok),
                     ("margin-preservation", preservation_ok)):
        print(f"{name:20s} {'pass' if ok else 'FAIL'}")
    return 0 if report["passed"] else 1


def _sweep_cell(cfg: dict, variant: str, rate: float,
                seeds: list[int]) -> list[tuple]:
    cell_cfg = dict(cfg, variant=variant)
    train_ds = _synthetic_train(cell_cfg, noise_rate=rate)
    test_ds = _synthetic_test(cell_cfg)
    report = T.run_experiment(_train_config(cell_cfg, seeds[0]),
                              train_ds, test_ds, seeds)
    return [(cfg["dataset_name"], variant, cfg["noise_type"], rate, seed,
             report.per_seed_accuracy[seed]) for seed in seeds]


def _cmd_sweep(args) -> int:
    overrides = _overrides_from(args, ("epochs", "routing", "noise_type"))
    if args.seeds is not None:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    cfg = C.load_config(args.config, overrides)
    rates = [float(r) for r in args.rates.split(",")]
    variants = (list(P.VARIANTS) if args.variants == "all"
                else args.variants.split(","))
    for v in variants:
        if v not in P.VARIANTS:
            raise VisPromptError(f"unknown variant {v!r}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    C.write_effective_config(cfg, out_dir)

    cells = [(variant, rate) for variant in variants for rate in rates]
    seeds = cfg["seeds"]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = {pool.submit(_sweep_cell, cfg, v, r, seeds): (v, r)
                   for v, r in cells}
        rows = []
        for future in futures:
            rows.extend(future.result())

    rows.sort(key=lambda r: (r[1], r[3], r[4]))
    _write_results_csv(out_dir / "results.csv", rows)

    summary: dict = {"cells": {}, "variant_averages": {}}
    for variant in variants:
        cell_means = []
        for rate in rates:
            accs = [r[5] for r in rows if r[1] == variant and r[3] == rate]
            key = f"{variant}@{rate:g}"
            summary["cells"][key] = {"mean": float(np.mean(accs)),
                                     "std": float(np.std(accs))}
            cell_means.append(float(np.mean(accs)))
        summary["variant_averages"][variant] = float(np.mean(cell_means))
    _write_json(out_dir / "summary.json", summary)
    print(f"wrote {out_dir / 'results.csv'} with {len(rows)} rows")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="visprompt",
                     description="noise-robust vision-guided prompt learning")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--shots", type=int, required=True,
                   help="samples per class")
    p.add_argument("--tokens", type=int, default=C.DEFAULTS["n_tokens"])
    p.add_argument("--dim", type=int, default=C.DEFAULTS["token_dim"])
    p.add_argument("--eps-v", dest="eps_v", type=float,
                   default=C.DEFAULTS["eps_v"])
    p.add_argument("--informative", type=int,
                   default=C.DEFAULTS["n_informative"])
    p.add_argument("--margin-scale", type=float,
                   default=C.DEFAULTS["margin_scale"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prototype-seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("noise", help="inject label noise into a VPFT file")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--type", choices=("sym", "asym"), required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_noise)

    p = sub.add_parser("train", help="train and evaluate over the seed list")
    p.add_argument("--data", default=None, help="training VPFT file")
    p.add_argument("--test-data", default=None, help="clean test VPFT file")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", choices=P.VARIANTS, default=None)
    p.add_argument("--routing", choices=T.ROUTINGS, default=None)
    p.add_argument("--noise-rate", dest="noise_rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a VPFT file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("partition",
                       help="dump the transport-based reliability split")
    p.add_argument("--data", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_partition)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("verify-theory",
                       help="numerical verification of the robustness bounds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-delta", default="0,1,2,4")
    p.add_argument("--grid-epsv", default="0,0.05,0.1,0.2")
    p.add_argument("--eps-v", dest="eps_v", type=float, default=0.1,
                   help="dispersion for the margin grid")
    p.add_argument("--delta", type=float, default=4.0,
                   help="margin for the dispersion grid")
    p.add_argument("--grid-seeds", type=int, default=20)
    p.add_argument("--tail-vectors", type=int, default=100)
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_verify_theory)

    p = sub.add_parser("sweep", help="noise-rate x variant accuracy sweep")
    p.add_argument("--rates", required=True, help="comma-separated rates")
    p.add_argument("--variants", default="all")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--routing", choices=T.ROUTINGS, default=None)
    p.add_argument("--noise-type", dest="noise_type",
                   choices=("sym", "asym"), default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(handler=_cmd_sweep)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.handler(args)
    except VisPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - fault barrier for exit code 2
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
