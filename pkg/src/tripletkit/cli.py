"""Command-line entry point: datagen, train, evaluate, bench-losses.

Exit codes: 0 success, 2 usage/config error, 3 runtime data error,
4 collapse abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import datagen, diagnostics, evalkit, losses, numcore, optim, sampling, training

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_COLLAPSE = 4

BENCH_MARGINS = ("0.1", "0.2", "0.5", "1.0", "soft")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="tripletkit")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic identity dataset")
    _add_common(p)
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--per-id", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--identity-spread", type=float, default=4.0)
    p.add_argument("--intra-spread", type=float, default=0.5)
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.add_argument("--name", default="train")

    p = sub.add_parser("train", help="train an embedding model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--loss", choices=losses.LOSS_NAMES, default="batch_hard")
    p.add_argument("--margin", default="soft",
                   help="'soft' or a nonnegative real")
    p.add_argument("--metric", choices=("euclidean", "squared_euclidean"),
                   default="euclidean")
    p.add_argument("--P", type=int, default=8)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--B", type=int, default=12)
    p.add_argument("--widths", default="16,32,32",
                   help="comma-separated layer widths, input first")
    p.add_argument("--eps0", type=float, default=1e-3)
    p.add_argument("--t0", type=int, default=1500)
    p.add_argument("--t1", type=int, default=2500)
    p.add_argument("--averaging", choices=("all", "nonzero"), default="all")
    p.add_argument("--ohm-sample-fraction", type=float, default=0.25)
    p.add_argument("--ohm-refresh-every", type=int, default=500)
    p.add_argument("--init-scale", type=float, default=1.0)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--multi-query", action="store_true")
    p.add_argument("--no-camera-filter", action="store_true")
    p.add_argument("--cmc-ranks", default="1,5,10")
    p.add_argument("--distractors", help="extra gallery CSV, identities "
                                         "disjoint from queries")

    p = sub.add_parser("bench-losses", help="train/evaluate a loss x margin grid")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--losses", default="batch_hard,batch_all",
                   help="comma-separated subset of the loss enumeration")
    p.add_argument("--margins", default=",".join(BENCH_MARGINS))
    p.add_argument("--val-fraction", type=float, default=0.3)
    p.add_argument("--widths", default="16,32,32")
    p.add_argument("--eps0", type=float, default=1e-3)
    p.add_argument("--t0", type=int, default=1500)
    p.add_argument("--t1", type=int, default=2500)
    p.add_argument("--P", type=int, default=8)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--B", type=int, default=12)
    return top


def _merge_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Config file values fill in anywhere the flag kept its default."""
    if not getattr(args, "config", None):
        return
    with open(args.config, encoding="utf-8") as f:
        doc = json.load(f)
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


def _parse_widths(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",")]


def _run_config_from_args(args: argparse.Namespace) -> training.RunConfig:
    return training.RunConfig(
        loss=args.loss,
        margin=losses.parse_margin(str(args.margin)),
        metric=args.metric,
        P=args.P, K=args.K, B=args.B,
        layer_widths=_parse_widths(args.widths),
        schedule=optim.Schedule(args.eps0, args.t0, args.t1),
        seed=args.seed,
        averaging=args.averaging,
        ohm_sample_fraction=args.ohm_sample_fraction,
        ohm_refresh_every=args.ohm_refresh_every,
        init_scale=args.init_scale,
    )


def cmd_datagen(args) -> int:
    spec = datagen.GenSpec(
        num_identities=args.ids, items_per_identity=args.per_id,
        feature_dim=args.dim, identity_spread=args.identity_spread,
        intra_spread=args.intra_spread, num_cameras=args.cameras,
        outlier_rate=args.outlier_rate, seed=args.seed)
    csv_path, json_path = datagen.write_generated(args.out, spec, args.name)
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config_from_args(args)
    dataset = sampling.read_dataset_csv(args.data)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.csv")
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    writer = diagnostics.TrainLogWriter(log_path)
    try:
        result = training.train(cfg, dataset, writer)
    except training.CollapseError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    numcore.save_checkpoint(ckpt_path, result.params,
                            result.state.to_dict())
    print(f"wrote {ckpt_path} and {log_path}")
    return EXIT_OK


def _print_eval(tag: str, result: evalkit.EvalResult) -> None:
    r1 = result.cmc.get(1, float("nan"))
    r5 = result.cmc.get(5, float("nan"))
    print(f"{tag}mAP={result.map:.4f} rank-1={r1:.4f} rank-5={r5:.4f} "
          f"(queries={result.num_queries}, skipped={result.num_skipped})")


def cmd_evaluate(args) -> int:
    params, _ = numcore.load_checkpoint(args.checkpoint)
    queries = sampling.read_dataset_csv(args.queries)
    gallery = sampling.read_dataset_csv(args.gallery)
    if queries.feature_dim != params.input_dim or \
            gallery.feature_dim != params.input_dim:
        print("error: dataset feature width does not match checkpoint",
              file=sys.stderr)
        return EXIT_DATA
    protocol = evalkit.EvalProtocol(
        mode="multi_query" if args.multi_query else "single_query",
        exclude_same_camera_same_id=not args.no_camera_filter,
        cmc_ranks=tuple(int(v) for v in args.cmc_ranks.split(",")))
    q_emb = training.embed_dataset(params, queries)
    g_emb = training.embed_dataset(params, gallery)
    result = evalkit.evaluate(q_emb, g_emb, protocol)
    doc = result.to_dict(protocol)
    if args.distractors:
        distractors = sampling.read_dataset_csv(args.distractors)
        d_emb = training.embed_dataset(params, distractors)
        injected = evalkit.inject_distractors(g_emb, d_emb, q_emb.pids)
        after = evalkit.evaluate(q_emb, injected, protocol)
        doc["with_distractors"] = after.to_dict()
        _print_eval("pre-distractor  ", result)
        _print_eval("post-distractor ", after)
    else:
        _print_eval("", result)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
    print(f"wrote {report_path}")
    return EXIT_OK


def run_bench_cell(loss_name: str, margin_text: str, train_set, val_set,
                   base_cfg: training.RunConfig) -> dict:
    """Train and evaluate one grid cell; failures are reported, not raised."""
    cfg = training.RunConfig(
        loss=loss_name, margin=losses.parse_margin(margin_text),
        metric=base_cfg.metric, P=base_cfg.P, K=base_cfg.K, B=base_cfg.B,
        layer_widths=list(base_cfg.layer_widths), schedule=base_cfg.schedule,
        seed=base_cfg.seed, averaging=base_cfg.averaging,
        ohm_sample_fraction=base_cfg.ohm_sample_fraction,
        ohm_refresh_every=base_cfg.ohm_refresh_every,
        init_scale=base_cfg.init_scale)
    cell = {"loss": loss_name, "margin": margin_text,
            "map": "", "rank1": "", "status": "ok"}
    try:
        result = training.train(cfg, train_set)
        ev = training.validation_map(result.params, val_set)
        cell["map"] = f"{ev.map:.4f}"
        cell["rank1"] = f"{ev.cmc[1]:.4f}"
    except training.CollapseError:
        cell["status"] = "*"        # trapped in a bad optimum
    except Exception as exc:        # grid continues past any cell crash
        cell["status"] = f"failed: {exc}"
    return cell


def cmd_bench_losses(args) -> int:
    dataset = sampling.read_dataset_csv(args.data)
    base = training.RunConfig(
        loss="batch_hard", margin=losses.MarginMode.soft(),
        P=args.P, K=args.K, B=args.B,
        layer_widths=_parse_widths(args.widths),
        schedule=optim.Schedule(args.eps0, args.t0, args.t1),
        seed=args.seed)
    train_set, val_set = training.identity_disjoint_split(
        dataset, args.val_fraction, args.seed)
    loss_names = [s.strip() for s in args.losses.split(",")]
    for name in loss_names:
        if name not in losses.LOSS_NAMES:
            print(f"error: unknown loss {name!r}", file=sys.stderr)
            return EXIT_USAGE
    margins = [s.strip() for s in args.margins.split(",")]

    cells = [run_bench_cell(ln, mt, train_set, val_set, base)
             for ln in loss_names for mt in margins]

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "bench_losses.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.DictWriter(f, fieldnames=["loss", "margin", "map", "rank1",
                                          "status"], lineterminator="\n")
        w.writeheader()
        w.writerows(cells)
    print(f"{'loss':<16}{'margin':<8}{'mAP':<10}{'rank-1':<10}status")
    for c in cells:
        print(f"{c['loss']:<16}{c['margin']:<8}{c['map']:<10}{c['rank1']:<10}"
              f"{c['status']}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default
                for sp in parser._subparsers._group_actions[0].choices.values()
                for a in sp._actions}
    try:
        _merge_config(args, defaults)
        if args.command == "datagen":
            return cmd_datagen(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "bench-losses":
            return cmd_bench_losses(args)
    except (training.ConfigError, optim.ScheduleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, sampling.SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
