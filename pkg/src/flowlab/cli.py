"""Command-line entry point: train / sample / compare / verify / plot.

Everything a command needs comes from a UTF-8 JSON config; the only flag
overrides are --seed and --out-dir, so every run is reproducible from its
config file. The schema rejects unknown keys at every level. Exit codes:
0 success, 2 input/config error, 3 numeric/runtime failure.

Output formats are pinned: CSV with RFC-4180 quoting, "." decimal and LF
line endings; JSON reports with sorted keys; SVG figures rendered with a
fixed hash salt and no creation date, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import figures, verify
from .datasets import (
    Checkerboard,
    GaussianMixture,
    GaussianSingle,
    TwoMoons,
)
from .errors import (
    CheckpointFormatError,
    ConfigError,
    FlowLabError,
    InputError,
    NumericError,
)
from .guidance import STRATEGY_CLASSES, GuidanceStrategy, RectCfgPP
from .model import MlpVelocityField, TrainMeta, load_model_file, save_model_file
from .numerics import MODEL_INIT_STREAM, METRIC_STREAM_BASE, VERIFY_STREAM_BASE, RngStream
from .sampler import SamplerConfig, sample, time_grid
from .training import TrainConfig, train

# -- config schema ---------------------------------------------------------------

_TOP_KEYS = {
    "seed", "out_dir", "dataset", "model", "train", "sampler",
    "guidance", "label", "checkpoint", "compare", "verify", "plot",
}
_REQUIRED = {
    "train": ("seed", "dataset", "train"),
    "sample": ("seed", "dataset", "checkpoint", "sampler", "guidance", "label"),
    "compare": ("seed", "dataset", "checkpoint", "sampler", "guidance", "label"),
    "verify": ("seed", "dataset", "checkpoint", "guidance", "label"),
    "plot": ("seed", "plot"),
}
_SECTION_KEYS = {
    "dataset": {"kind", "mean", "means", "sigma_data", "k", "radius", "scale", "tiles", "extent"},
    "model": {"hidden", "embed_dim"},
    "train": {
        "epochs", "batch_size", "learning_rate", "beta1", "beta2", "eps",
        "p_uncond", "eval_every", "eval_probes",
    },
    "sampler": {
        "n_steps", "n_chains", "record_trajectory", "record_reference",
        "strict", "integrator", "custom_grid",
    },
    "guidance": {
        "name", "omega", "lambda_max", "gamma", "sigma_noise", "schedule",
        "table", "eta", "r", "beta", "zero_init_steps",
    },
    "compare": {"nfe_sweep", "n_data", "n_projections", "bank_size"},
    "verify": {"n_pairs", "n_probes", "n_states", "dts", "t_grid"},
    "plot": {"trajectory_csv", "out", "steps", "paths"},
}
_GUIDANCE_PARAM_KEYS = {
    "none": set(),
    "cfg": {"omega"},
    "rect_cfgpp": {"lambda_max", "gamma", "sigma_noise", "schedule", "table"},
    "apg": {"eta", "r", "beta"},
    "cfg_zero_star": {"omega", "zero_init_steps"},
}


def _reject_unknown(section: str, spec: dict, allowed: set[str]) -> None:
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")


def validate_config(config: dict, command: str) -> None:
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown("config", config, _TOP_KEYS)
    for key in _REQUIRED[command]:
        if key not in config:
            raise ConfigError(f"missing required key '{key}' for command '{command}'")
    if not isinstance(config["seed"], int):
        raise ConfigError("'seed' must be an integer")
    for section, allowed in _SECTION_KEYS.items():
        if section not in config:
            continue
        spec = config[section]
        if section == "guidance" and isinstance(spec, list):
            for entry in spec:
                _reject_unknown("guidance[]", entry, allowed)
            continue
        if not isinstance(spec, dict):
            raise ConfigError(f"'{section}' must be a JSON object")
        _reject_unknown(section, spec, allowed)


def build_dataset(spec: dict):
    kind = spec.get("kind")
    if kind is None:
        raise ConfigError("dataset spec is missing 'kind'")
    if kind == "gaussian_single":
        if "mean" not in spec:
            raise ConfigError("gaussian_single dataset needs 'mean'")
        return GaussianSingle(mean=spec["mean"], sigma_data=spec.get("sigma_data", 0.5))
    if kind == "gaussian_mixture":
        if "means" in spec:
            return GaussianMixture(means=spec["means"], sigma_data=spec.get("sigma_data", 0.3))
        return GaussianMixture.ring(
            k=spec.get("k", 8), radius=spec.get("radius", 4.0),
            sigma_data=spec.get("sigma_data", 0.3),
        )
    if kind == "two_moons":
        return TwoMoons(sigma_data=spec.get("sigma_data", 0.1), scale=spec.get("scale", 2.0))
    if kind == "checkerboard":
        return Checkerboard(tiles=spec.get("tiles", 4), extent=spec.get("extent", 4.0))
    raise ConfigError(f"unknown dataset kind '{kind}'")


def build_strategy(spec: dict) -> GuidanceStrategy:
    name = spec.get("name")
    if name not in STRATEGY_CLASSES:
        raise ConfigError(f"unknown guidance name '{name}' (expected one of {sorted(STRATEGY_CLASSES)})")
    params = {k: v for k, v in spec.items() if k != "name"}
    _reject_unknown(f"guidance '{name}'", params, _GUIDANCE_PARAM_KEYS[name])
    if name == "rect_cfgpp" and "table" in params:
        params["table"] = tuple(tuple(p) for p in params["table"])
    return STRATEGY_CLASSES[name](**params)


def build_model(config: dict, dataset, seed: int) -> MlpVelocityField:
    spec = config.get("model", {})
    return MlpVelocityField(
        dim=dataset.dim,
        n_labels=dataset.n_labels,
        embed_dim=spec.get("embed_dim", 8),
        hidden=tuple(spec.get("hidden", (64, 64, 64))),
        rng=RngStream(seed, MODEL_INIT_STREAM),
    )


def build_sampler_config(config: dict, seed: int) -> tuple[SamplerConfig, int]:
    spec = dict(config.get("sampler", {}))
    n_chains = spec.pop("n_chains", 200)
    if "custom_grid" in spec and spec["custom_grid"] is not None:
        spec["custom_grid"] = tuple(spec["custom_grid"])
    return SamplerConfig(seed=seed, **spec), int(n_chains)


def _label(config: dict):
    y = config.get("label")
    return None if y is None else int(y)


# -- pinned artifact writers --------------------------------------------------------


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _final_points_rows(run):
    ok = [i for i in range(len(run.final_points) + len(run.failed_chains))
          if i not in set(run.failed_chains)]
    for chain, point in zip(ok, run.final_points):
        yield [chain, *[float(v) for v in point]]


def _trajectory_rows(run):
    for chain, traj in enumerate(run.trajectories):
        n_steps = len(traj.diagnostics)
        for k in range(n_steps + 1):
            row = [chain, k, float(traj.times[k]), *[float(v) for v in traj.states[k]]]
            if k < n_steps:
                diag = traj.diagnostics[k]
                row += [diag.alpha_t, diag.dv_norm, diag.deviation_from_conditional]
            else:
                row += [None, None, None]
            yield row


# -- commands -------------------------------------------------------------------------


def cmd_train(config: dict, out_dir: Path) -> int:
    dataset = build_dataset(config["dataset"])
    seed = config["seed"]
    field = build_model(config, dataset, seed)
    train_cfg = TrainConfig(seed=seed, **config["train"])
    report = train(field, dataset, train_cfg)

    ckpt_path = out_dir / config.get("checkpoint", "model.ckpt")
    meta = TrainMeta(
        epochs=train_cfg.epochs,
        final_loss=report.loss_curve[-1][1] if report.loss_curve else 0.0,
        seed=seed,
    )
    save_model_file(field, ckpt_path, meta)

    rmse_by_epoch = dict(report.oracle_rmse_curve)
    write_csv(
        out_dir / "loss.csv",
        ["epoch", "loss", "oracle_rmse"],
        ([epoch, loss, rmse_by_epoch.get(epoch)] for epoch, loss in report.loss_curve),
    )
    print(
        f"train: {train_cfg.epochs} epochs, final loss "
        f"{meta.final_loss:.6f}, checkpoint {ckpt_path}, {report.wall_seconds:.1f}s"
    )
    return 0


def _load_checkpoint(config: dict, out_dir: Path) -> MlpVelocityField:
    raw = Path(config["checkpoint"])
    path = raw if raw.is_absolute() or raw.exists() else out_dir / raw
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    field, _ = load_model_file(path)
    return field


def cmd_sample(config: dict, out_dir: Path) -> int:
    dataset = build_dataset(config["dataset"])
    field = _load_checkpoint(config, out_dir)
    strategy_spec = config["guidance"]
    if isinstance(strategy_spec, list):
        raise ConfigError("'sample' takes a single guidance spec; use 'compare' for lists")
    strategy = build_strategy(strategy_spec)
    sampler_cfg, n_chains = build_sampler_config(config, config["seed"])

    run = sample(field, strategy, dataset.dim, _label(config), n_chains, sampler_cfg)
    write_csv(
        out_dir / "final_points.csv",
        ["chain", *[f"x_{i}" for i in range(dataset.dim)]],
        _final_points_rows(run),
    )
    if sampler_cfg.record_trajectory:
        write_csv(
            out_dir / "trajectory.csv",
            ["chain", "step", "t", *[f"x_{i}" for i in range(dataset.dim)],
             "alpha", "dv_norm", "deviation"],
            _trajectory_rows(run),
        )
    dropped = f", dropped {len(run.failed_chains)} chains" if run.failed_chains else ""
    print(
        f"sample: {strategy.name}, {n_chains} chains x {sampler_cfg.n_steps} steps, "
        f"nfe {run.nfe_total}{dropped}"
    )
    return 0


def _scale_of(strategy: GuidanceStrategy):
    return {
        "none": None,
        "cfg": getattr(strategy, "omega", None),
        "cfg_zero_star": getattr(strategy, "omega", None),
        "rect_cfgpp": getattr(strategy, "lambda_max", None),
        "apg": getattr(strategy, "eta", None),
    }[strategy.name]


def cmd_compare(config: dict, out_dir: Path) -> int:
    dataset = build_dataset(config["dataset"])
    field = _load_checkpoint(config, out_dir)
    specs = config["guidance"]
    if not isinstance(specs, list) or len(specs) < 2:
        raise ConfigError("'compare' needs a guidance list with at least two entries")
    strategies = [build_strategy(s) for s in specs]
    label = _label(config)
    if label is None:
        raise ConfigError("'compare' needs an integer label to define the data reference")
    seed = config["seed"]
    opts = config.get("compare", {})
    n_data = int(opts.get("n_data", 2000))
    n_projections = int(opts.get("n_projections", 128))
    bank_size = int(opts.get("bank_size", 20000))
    base_cfg, n_chains = build_sampler_config(config, seed)
    sweep = opts.get("nfe_sweep", [base_cfg.n_steps])

    data_rng = RngStream(seed, METRIC_STREAM_BASE)
    ys = np.full(n_data, label, dtype=np.int64)
    data_ref = dataset.sample_x0_batch(ys, data_rng)
    gaussian = isinstance(dataset, (GaussianSingle, GaussianMixture))

    blocks = []
    all_rows = []
    for n_steps in sweep:
        cfg = SamplerConfig(
            n_steps=int(n_steps), seed=seed, record_trajectory=True,
            record_reference=False, strict=base_cfg.strict, integrator=base_cfg.integrator,
        )
        grid = time_grid(cfg)
        manifold_t = float(grid[len(grid) // 2])
        bank = None
        if gaussian:
            bank = verify.oracle_trajectory_bank(
                dataset, label, [manifold_t], bank_size, int(n_steps), seed + 1
            )[manifold_t]
        rows = []
        for strategy in strategies:
            try:
                run = sample(field, strategy, dataset.dim, label, n_chains, cfg)
            except NumericError as exc:
                raise NumericError(
                    f"strategy '{strategy.name}' failed: {exc}", exc.step_index
                ) from exc
            proj_rng = RngStream(seed, METRIC_STREAM_BASE + 1)
            sw = verify.sliced_wasserstein(run.final_points, data_ref, n_projections, proj_rng)
            energy = verify.energy_distance(run.final_points, data_ref)
            p95 = None
            if bank is not None:
                states = verify.states_at_time(run.trajectories, manifold_t)
                p95 = verify.manifold_distance(states, bank).p95
            row = {
                "name": strategy.name,
                "scale": _scale_of(strategy),
                "n_steps": int(n_steps),
                "nfe_total": run.nfe_total,
                "sw_to_data": sw,
                "energy_distance": energy,
                "deviation_mean": run.deviation_mean,
                "deviation_max": run.deviation_max,
                "manifold_p95": p95,
                "manifold_t": manifold_t if p95 is not None else None,
            }
            rows.append(row)
            all_rows.append(row)
        blocks.append({"n_steps": int(n_steps), "rows": rows})

    write_json(out_dir / "compare_report.json", {"label": label, "blocks": blocks})
    write_csv(
        out_dir / "compare_metrics.csv",
        ["name", "scale", "n_steps", "nfe_total", "sw_to_data", "energy_distance",
         "deviation_mean", "deviation_max", "manifold_p95"],
        ([r["name"], r["scale"], r["n_steps"], r["nfe_total"], r["sw_to_data"],
          r["energy_distance"], r["deviation_mean"], r["deviation_max"], r["manifold_p95"]]
         for r in all_rows),
    )
    figures.render_compare_figure(all_rows, out_dir / "compare_metrics.svg")
    print(f"compare: {len(all_rows)} runs over {len(blocks)} step budgets -> compare_report.json")
    return 0


def cmd_verify(config: dict, out_dir: Path) -> int:
    dataset = build_dataset(config["dataset"])
    field = _load_checkpoint(config, out_dir)
    strategy = build_strategy(config["guidance"])
    if not isinstance(strategy, RectCfgPP):
        raise ConfigError("'verify' checks the predictor-corrector rule; guidance must be rect_cfgpp")
    label = _label(config)
    if label is None:
        raise ConfigError("'verify' needs an integer label")
    seed = config["seed"]
    opts = config.get("verify", {})
    n_pairs = int(opts.get("n_pairs", 2000))
    n_probes = int(opts.get("n_probes", 10000))
    n_states = int(opts.get("n_states", 2000))
    dts = [float(d) for d in opts.get("dts", (1 / 16, 1 / 32, 1 / 64, 1 / 128, 1 / 256))]
    t_grid = [float(t) for t in opts.get("t_grid", (0.0, 0.25, 0.5, 0.75, 1.0))]

    region = verify.data_region(dataset)
    est_rng = RngStream(seed, VERIFY_STREAM_BASE)
    estimates = verify.estimate_bounds(field, region, t_grid, label, n_pairs, n_probes, est_rng)

    shift_rng = RngStream(seed, VERIFY_STREAM_BASE + 1)
    shift = verify.check_midpoint_shift(
        field, dataset, label, 1 / 64, n_states, shift_rng,
        estimates.lipschitz, estimates.conditional_velocity_bound,
    )
    slope_rng = RngStream(seed, VERIFY_STREAM_BASE + 2)
    slope, slope_points = verify.midpoint_shift_slope(field, dataset, label, dts, n_states, slope_rng)

    sampler_cfg, n_chains = build_sampler_config(config, seed)
    sampler_cfg.record_trajectory = True
    sampler_cfg.record_reference = True
    run = sample(field, strategy, dataset.dim, label, n_chains, sampler_cfg)
    deviation = verify.check_step_deviation(run.trajectories, estimates.guidance_diff_bound)

    report = {
        "estimates": {
            "lipschitz": estimates.lipschitz,
            "guidance_diff_bound": estimates.guidance_diff_bound,
            "conditional_velocity_bound": estimates.conditional_velocity_bound,
            "region_lo": estimates.region_lo,
            "region_hi": estimates.region_hi,
            "n_pairs": n_pairs,
            "n_probes": n_probes,
        },
        "midpoint_shift": {
            "dt": shift.dt,
            "max_lhs": float(shift.lhs.max()),
            "rhs": shift.rhs,
            "max_ratio": shift.max_ratio,
            "violation_rate": shift.violation_rate,
            "common_time_max_lhs": shift.extra["common_time_max_lhs"],
            "slope": slope,
            "slope_points": [[dt, lhs] for dt, lhs in slope_points],
        },
        "step_deviation": {
            "n_steps_checked": deviation.n_steps_checked,
            "equality_max_rel_err": deviation.equality_max_rel_err,
            "bound_max_ratio": deviation.bound.max_ratio,
            "bound_violation_rate": deviation.bound.violation_rate,
        },
        "flags": {
            "slope_in_range": 0.7 <= slope <= 1.3,
            "deviation_equality_pass": deviation.equality_pass,
            "deviation_bound_pass": deviation.bound.violation_rate == 0.0,
        },
    }
    if strategy.schedule == "power":
        analytic, numeric, err = verify.alpha_integral_check(strategy.lambda_max, strategy.gamma)
        report["alpha_integral"] = {"analytic": analytic, "quadrature": numeric, "abs_err": err}
        report["flags"]["alpha_integral_pass"] = err <= 1e-10

    if isinstance(dataset, GaussianSingle):
        dev_rng = RngStream(seed, METRIC_STREAM_BASE + 2)
        curve = verify.distributional_deviation(
            run.trajectories, dataset, label, run.trajectories[0].times, dev_rng
        )
        write_csv(
            out_dir / "deviation_curve.csv",
            ["t", "sw", "kl"],
            ([p.t, p.sw, p.kl] for p in curve),
        )
        figures.render_deviation_curve([(p.t, p.sw) for p in curve], out_dir / "deviation_curve.svg")

    write_json(out_dir / "verify_report.json", report)
    flags = report["flags"]
    print("verify: " + ", ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in sorted(flags.items())))
    return 0


def _read_trajectory_csv(path: Path):
    if not path.exists():
        raise ConfigError(f"trajectory CSV not found: {path}")
    chains: dict[int, dict[int, tuple[float, tuple[float, ...]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file (line 1)") from None
        if header[:3] != ["chain", "step", "t"] or not header[3].startswith("x_"):
            raise InputError(f"{path}: unexpected header at line 1: {header[:4]}")
        x_cols = [i for i, name in enumerate(header) if name.startswith("x_")]
        for lineno, row in enumerate(reader, start=2):
            try:
                chain = int(row[0])
                step = int(row[1])
                t = float(row[2])
                point = tuple(float(row[i]) for i in x_cols)
            except (ValueError, IndexError):
                raise InputError(f"{path}: malformed row at line {lineno}") from None
            chains.setdefault(chain, {})[step] = (t, point)
    return chains


def cmd_plot(config: dict, out_dir: Path) -> int:
    spec = config["plot"]
    if "trajectory_csv" not in spec:
        raise ConfigError("plot spec is missing 'trajectory_csv'")
    chains = _read_trajectory_csv(Path(spec["trajectory_csv"]))
    steps = spec.get("steps")
    if steps is None:
        max_step = max((max(s) for s in (c.keys() for c in chains.values())), default=0)
        steps = sorted({0, max_step // 4, max_step // 2, (3 * max_step) // 4, max_step})
    means = None
    if "dataset" in config:
        dataset = build_dataset(config["dataset"])
        if hasattr(dataset, "means"):
            means = [list(map(float, m)) for m in dataset.means]
        elif hasattr(dataset, "mean"):
            means = [list(map(float, dataset.mean))]
    out_path = out_dir / spec.get("out", "trajectories.svg")
    figures.render_trajectory_panels(
        chains, [int(s) for s in steps], out_path, means=means,
        draw_paths=bool(spec.get("paths", False)),
    )
    print(f"plot: {len(chains)} chains, panels {steps} -> {out_path}")
    return 0


# -- entry point ------------------------------------------------------------------------


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "compare": cmd_compare,
    "verify": cmd_verify,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowlab", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default=None, help="override the output directory")
    args = parser.parse_args(argv)

    try:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

        if args.seed is not None:
            config["seed"] = args.seed
        if args.out_dir is not None:
            config["out_dir"] = args.out_dir
        validate_config(config, args.command)
        out_dir = Path(config.get("out_dir", "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](config, out_dir)
    except (ConfigError, InputError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FlowLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
