"""Command-line entry point.

Subcommands: generate, build-graph, train, finetune, rollout, ensemble,
evaluate, describe. Configuration values resolve with the precedence
flag > config file > built-in default; the effective configuration is echoed
into the report directory for provenance. ``--threads`` (default from the
RIGNO_THREADS environment variable) pins the BLAS thread pools, which must
happen before numpy loads, so all heavy imports live inside the commands.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}

# name -> (parse, default); mirrors GraphConfig and TrainConfig one-to-one
GRAPH_KEYS = {
    "subsample_factor": (float, 4.0),
    "overlap_encoder": (float, 1.0),
    "overlap_decoder": (float, 2.0),
    "edge_levels": (int, 6),
    "level_subsample": (float, 2.0),
    "k_freq": (int, 4),
    "rng_seed": (int, 0),
}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


def _parse_opt_int(text: str):
    text = text.strip().lower()
    return None if text in ("none", "") else int(text)


TRAIN_KEYS = {
    "epochs": (int, 2500),
    "batch_size": (int, 16),
    "max_lead": (_parse_opt_int, None),
    "curriculum_fraction": (float, 0.2),
    "pairs_per_epoch": (int, 1),
    "validate_every": (int, 10),
    "time_stride": (int, 2),
    "time_max_index": (int, 14),
    "strategy": (str, "derivative"),
    "latent_width": (int, 128),
    "processor_blocks": (int, 18),
    "cond_hidden": (int, 16),
    "mask_prob": (float, 0.5),
    "weight_decay": (float, 1e-8),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "finetune_fraction": (float, 0.1),
    "gradcut": (_parse_bool, True),
    "precision": (str, "float32"),
    "seed": (int, 0),
}

ALL_KEYS = {**GRAPH_KEYS, **TRAIN_KEYS}


def _read_config_file(path: str) -> dict:
    from .errors import ConfigError

    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in ALL_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parse, _ = ALL_KEYS[key]
            try:
                values[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    for key, (parse, default) in ALL_KEYS.items():
        parser.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"cfgkey_{key}",
            type=parse if parse is not str else str,
            default=None,
            help=f"config key {key} (default {default})",
            metavar="V",
        )


def _resolve_config(args) -> dict:
    values = {key: default for key, (_, default) in ALL_KEYS.items()}
    if getattr(args, "config", None):
        values.update(_read_config_file(args.config))
    for key in ALL_KEYS:
        flag = getattr(args, f"cfgkey_{key}", None)
        if flag is not None:
            values[key] = flag
    return values


def _configs_from(values: dict):
    from .graphs import GraphConfig
    from .training import TrainConfig

    graph_cfg = GraphConfig(**{k: values[k] for k in GRAPH_KEYS})
    train_cfg = TrainConfig(**{k: values[k] for k in TRAIN_KEYS})
    return graph_cfg, train_cfg


def _echo_config(values: dict, report_dir: str) -> None:
    os.makedirs(report_dir, exist_ok=True)
    with open(os.path.join(report_dir, "config.txt"), "w") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")


def _write_csv(path: str, header: list[str], rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_split(args):
    from .data import read_dataset, take_samples

    ds = read_dataset(args.data)
    if getattr(args, "val_data", None):
        return ds, read_dataset(args.val_data)
    n_val = getattr(args, "val_samples", 0) or 0
    if n_val <= 0 or n_val >= ds.n_samples:
        from .errors import ConfigError

        raise ConfigError("provide --val-data or a --val-samples split below the sample count")
    return take_samples(ds, 0, ds.n_samples - n_val), take_samples(
        ds, ds.n_samples - n_val, ds.n_samples
    )


def cmd_generate(args) -> int:
    from .data import gen_heat_dirichlet, gen_heat_periodic, write_dataset

    if args.pde == "heat-dirichlet":
        ds = gen_heat_dirichlet(
            args.samples, args.points, t_final=args.tfinal, n_modes=args.modes,
            diffusivity=args.diffusivity, seed=args.seed, n_times=args.times,
        )
    elif args.pde == "heat-periodic":
        ds = gen_heat_periodic(
            args.samples, args.points, t_final=args.tfinal, k_modes=args.modes,
            diffusivity=args.diffusivity, seed=args.seed, n_times=args.times,
        )
    else:
        from .errors import ConfigError

        raise ConfigError(f"unknown pde {args.pde!r}")
    write_dataset(args.out, ds)
    print(f"wrote {args.out}: M={ds.n_samples} N={ds.cloud.n_points} N_t={ds.times.size}")
    return 0


def cmd_build_graph(args) -> int:
    import numpy as np

    from .data import read_dataset
    from .graphs import build_graph
    from .geometry import delaunay, extend_periodic

    values = _resolve_config(args)
    graph_cfg, _ = _configs_from(values)
    ds = read_dataset(args.data)
    rng = np.random.default_rng(graph_cfg.rng_seed)
    graph = build_graph(ds.cloud, graph_cfg, rng)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(values, out_dir)
    for tag, edges in (("p2r", graph.p2r), ("r2r", graph.r2r), ("r2p", graph.r2p)):
        _write_csv(
            os.path.join(out_dir, f"edges_{tag}.csv"),
            ["sender", "receiver", "set", "rel_x", "rel_y", "rel_norm"],
            (
                [int(s), int(r), tag, *map(float, f)]
                for s, r, f in zip(edges.senders, edges.receivers, edges.struct_feats)
            ),
        )
    if args.dump_geometry:
        reg = graph.regional_coords
        if ds.cloud.domain.periodic.any():
            from .geometry import PointCloud

            ext, _ = extend_periodic(PointCloud(reg, ds.cloud.domain))
            tri = delaunay(ext)
        else:
            tri = delaunay(reg)
        _write_csv(
            os.path.join(out_dir, "simplices.csv"),
            ["v0", "v1", "v2"],
            ([int(a), int(b), int(c)] for a, b, c in tri.simplices),
        )
        _write_csv(
            os.path.join(out_dir, "radii.csv"),
            ["node", "radius_encoder", "radius_decoder"],
            (
                [i, float(re_), float(rd)]
                for i, (re_, rd) in enumerate(zip(graph.radii_encoder, graph.radii_decoder))
            ),
        )
    print(
        f"graph: N={graph.n_physical} R={graph.n_regional} "
        f"p2r={graph.p2r.n_edges} r2r={graph.r2r.n_edges} r2p={graph.r2p.n_edges}"
    )
    return 0


def cmd_train(args) -> int:
    from .training import train

    values = _resolve_config(args)
    graph_cfg, train_cfg = _configs_from(values)
    train_ds, val_ds = _load_split(args)
    report_dir = args.report_dir or os.path.dirname(os.path.abspath(args.out))
    _echo_config(values, report_dir)
    os.makedirs(report_dir, exist_ok=True)
    log_path = os.path.join(report_dir, "train_log.csv")
    with open(log_path, "w", newline="") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "lr", "train_loss", "val_rel_l1"])

        def on_epoch(row):
            writer.writerow(
                [row["epoch"], row["lr"], row["train_loss"],
                 "" if row["val_rel_l1"] is None else row["val_rel_l1"]]
            )
            log_file.flush()

        result = train(train_ds, val_ds, train_cfg, graph_cfg, on_epoch=on_epoch)
    result.bundle.save(args.out)
    print(f"best validation rel-L1 {result.best_val:.6f} at epoch {result.best_epoch}")
    print(f"wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    from .inference import ModelBundle
    from .data import read_dataset, take_samples
    from .training import fractional_finetune

    values = _resolve_config(args)
    _, train_cfg = _configs_from(values)
    bundle = ModelBundle.load(args.checkpoint)
    ds = read_dataset(args.data)
    n_val = args.val_samples or 0
    if 0 < n_val < ds.n_samples:
        ds = take_samples(ds, 0, ds.n_samples - n_val)
    tuned = fractional_finetune(bundle, ds, train_cfg, epochs=args.epochs_override)
    tuned.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_rollout(args) -> int:
    import numpy as np

    from .data import read_dataset
    from .inference import ModelBundle, RolloutScheme, make_scheme, rollout

    bundle = ModelBundle.load(args.checkpoint)
    ds = read_dataset(args.data)
    graph = bundle.build_graph_for(ds)
    network = bundle.network_for(graph)
    if args.leads:
        scheme = RolloutScheme("custom", tuple(float(x) * ds.dt for x in args.leads.split(",")))
    else:
        scheme = make_scheme(args.scheme, ds.dt, args.target_index)
    u0 = ds.fields[args.sample : args.sample + 1, 0].astype(np.float64)
    c = None if ds.coeffs is None else ds.coeffs[args.sample : args.sample + 1].astype(np.float64)
    traj = rollout(network, bundle.stats, bundle.strategy, u0, c, scheme)
    rows = []
    for t, field in traj:
        for i in range(field.shape[1]):
            rows.append([t, i, *map(float, field[0, i])])
    value_cols = [f"value_{ch}" for ch in range(u0.shape[-1])]
    _write_csv(args.out, ["time", "node", *value_cols], rows)
    print(f"wrote {args.out} ({len(traj)} steps)")
    return 0


def cmd_ensemble(args) -> int:
    import numpy as np

    from .data import TrajectoryDataset, read_dataset, write_dataset
    from .inference import ModelBundle, ensemble_rollout, make_scheme

    bundle = ModelBundle.load(args.checkpoint)
    ds = read_dataset(args.data)
    graph = bundle.build_graph_for(ds)
    network = bundle.network_for(graph)
    scheme = make_scheme(args.scheme, ds.dt, args.target_index)
    u0 = ds.fields[args.sample : args.sample + 1, 0].astype(np.float64)
    c = None if ds.coeffs is None else ds.coeffs[args.sample : args.sample + 1].astype(np.float64)
    result = ensemble_rollout(
        network, bundle.stats, bundle.strategy, u0, c, scheme,
        members=args.members, seed=args.seed,
    )
    # Member 0 holds the ensemble mean, member 1 the std, at the target time.
    fields = np.stack([result.mean[0], result.std[0]])[:, None].astype(np.float32)
    out_ds = TrajectoryDataset(
        cloud=ds.cloud,
        times=np.array([sum(scheme.leads)]),
        fields=fields,
    )
    write_dataset(args.out, out_ds)
    print(f"wrote {args.out} (K={result.members})")
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from .data import read_dataset
    from .inference import ModelBundle, evaluate_dataset, make_scheme, noise_eval

    bundle = ModelBundle.load(args.checkpoint)
    ds = read_dataset(args.data)
    graph = bundle.build_graph_for(ds)
    report_dir = args.report_dir
    os.makedirs(report_dir, exist_ok=True)
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    rows = []
    medians = {}
    for kind in schemes:
        scheme = make_scheme(kind, ds.dt, args.target_index)
        errs = evaluate_dataset(bundle, ds, scheme, args.target_index, graph=graph)
        medians[kind] = float(np.median(errs))
        rows += [[m, kind, args.target_index, float(e)] for m, e in enumerate(errs)]
    _write_csv(os.path.join(report_dir, "errors.csv"),
               ["sample", "scheme", "time_index", "error"], rows)
    for kind in schemes:
        print(f"{kind}: median rel-L1 = {medians[kind]:.6f}")
    print(f"best: {min(medians.values()):.6f}")
    if args.noise:
        levels = [float(x) for x in args.noise.split(",")]
        scheme = make_scheme(schemes[0], ds.dt, args.target_index)
        ratios = noise_eval(bundle, ds, levels, scheme, seed=args.seed, graph=graph,
                            target_index=args.target_index)
        _write_csv(
            os.path.join(report_dir, "noise.csv"),
            ["sample", "noise_level", "induced_error"],
            (
                [m, c, float(v)]
                for c, arr in sorted(ratios.items())
                for m, v in enumerate(arr)
            ),
        )
        for c in levels:
            print(f"noise C={c}: mean induced error {float(np.mean(ratios[c])):.6f}")
    if args.resolutions:
        from .data import gen_heat_dirichlet, gen_heat_periodic
        from .errors import ConfigError
        from .inference import evaluate_resolution

        if not args.pde:
            raise ConfigError("--resolutions needs --pde (and --gen-seed) to regenerate "
                              "the same solutions at new point clouds")
        datasets = []
        for n in args.resolutions.split(","):
            if args.pde == "heat-dirichlet":
                datasets.append(gen_heat_dirichlet(
                    ds.n_samples, int(n), t_final=args.tfinal, n_modes=args.modes,
                    diffusivity=args.diffusivity, seed=args.gen_seed, n_times=args.times))
            else:
                datasets.append(gen_heat_periodic(
                    ds.n_samples, int(n), t_final=args.tfinal, k_modes=args.modes,
                    diffusivity=args.diffusivity, seed=args.gen_seed, n_times=args.times))
        train_r = None
        if args.train_points:
            train_r = int(args.train_points // bundle.graph_cfg.subsample_factor)
        rows = evaluate_resolution(
            bundle, datasets, train_r, scheme_kind=schemes[0],
            target_index=args.target_index,
        ) if train_r else [
            (d.cloud.n_points,
             float(np.median(evaluate_dataset(
                 bundle, d, make_scheme(schemes[0], d.dt, args.target_index),
                 args.target_index))))
            for d in datasets
        ]
        _write_csv(os.path.join(report_dir, "resolution.csv"),
                   ["resolution", "error"], rows)
        for n, err in rows:
            print(f"resolution {n}: median rel-L1 = {err:.6f}")
    return 0


def cmd_describe(args) -> int:
    from .inference import ModelBundle
    from .model import block_parameter_counts, parameter_count

    bundle = ModelBundle.load(args.checkpoint)
    counts = block_parameter_counts(bundle.params)
    width = max(len(k) for k in counts)
    for name, count in counts.items():
        print(f"{name:<{width}}  {count}")
    print(f"{'total':<{width}}  {parameter_count(bundle.params)}")
    print(
        f"strategy={bundle.strategy.kind} latent={bundle.model_cfg.latent_width} "
        f"blocks={bundle.model_cfg.processor_blocks} mask_prob={bundle.model_cfg.mask_prob}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgno", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (default: RIGNO_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate an analytic dataset")
    p.add_argument("--pde", required=True, choices=["heat-dirichlet", "heat-periodic"])
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--tfinal", type=float, default=0.005)
    p.add_argument("--modes", type=int, default=10)
    p.add_argument("--diffusivity", type=float, default=1.0)
    p.add_argument("--times", type=int, default=21)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-graph", help="build and export a regional graph")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dump-geometry", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--val-samples", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fractional-pairing fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-samples", type=int, default=0,
                   help="exclude this many trailing samples (the validation split)")
    p.add_argument("--epochs-override", type=int, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("rollout", help="autoregressive rollout of one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", default="ar2")
    p.add_argument("--leads", help="custom comma-separated leads in dt units")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--target-index", type=int, default=14)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("ensemble", help="masked-ensemble mean and std for one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", default="ar2")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--members", type=int, default=20)
    p.add_argument("--target-index", type=int, default=14)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="per-scheme test errors")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--schemes", default="ar2,ar4,dr")
    p.add_argument("--target-index", type=int, default=14)
    p.add_argument("--noise", help="comma-separated noise levels C")
    p.add_argument("--resolutions",
                   help="comma-separated point counts; re-evaluates the analytic "
                        "solutions on new clouds (needs --pde/--gen-seed)")
    p.add_argument("--pde", choices=["heat-dirichlet", "heat-periodic"])
    p.add_argument("--gen-seed", type=int, default=0)
    p.add_argument("--modes", type=int, default=10)
    p.add_argument("--tfinal", type=float, default=0.005)
    p.add_argument("--diffusivity", type=float, default=1.0)
    p.add_argument("--times", type=int, default=21)
    p.add_argument("--train-points", type=int, default=0,
                   help="training cloud size; enables regional-count correction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("describe", help="per-block parameter counts")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_describe)
    return parser


def _pin_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("RIGNO_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _pin_threads(args.threads)
    from .errors import ConfigError, FormatError

    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
