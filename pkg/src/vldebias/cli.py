"""Command-line pipeline: synth | train | debias | eval {...} | report.

Every flag doubles as a key of the JSON file given with ``--config`` (dashes or
underscores); explicit flags win over the file. Each command that writes to
``--out`` also writes ``resolved_config.json``, which replays the command when
passed back through ``--config``.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, fairmetrics
from .ba_net import load_checkpoint, save_checkpoint
from .embed_store import LabeledEmbeddingSet, load_set, pair_counterfactuals, save_set
from .errors import ConfigError, UsageError, VLDebiasError
from .synthgen import DEFAULT_AXES, UNIVERSAL_AXES, SynthConfig, generate, save_truth
from .trainer import TrainConfig, apply_debias, load_state, save_state, train, write_history_csv

PRESET_AXES = {"gender": DEFAULT_AXES, "universal": UNIVERSAL_AXES}
# execution settings that never change results and are left out of the snapshot
_NOT_CONFIG = {"config", "out", "threads", "handler", "command", "eval_command"}

CHECKPOINT = "checkpoint.bamod"
LOSSES = "losses.csv"
STATE = "train_state.npz"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
RESOLVED = "resolved_config.json"
DEBIASED = "debiased"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _parse_axes(spec) -> dict:
    """``gender`` / ``universal`` presets or ``name=v1,v2;name=...``."""
    if isinstance(spec, dict):
        return {k: tuple(v) for k, v in spec.items()}
    if spec in PRESET_AXES:
        return dict(PRESET_AXES[spec])
    axes = {}
    for part in filter(None, (p.strip() for p in str(spec).split(";"))):
        name, sep, values = part.partition("=")
        if not sep or not name:
            raise UsageError(f"bad axis spec {part!r}; expected name=v1,v2")
        axes[name.strip()] = tuple(v.strip() for v in values.split(",") if v.strip())
    if not axes:
        raise UsageError("empty axis spec")
    return axes


def _axis_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required argument(s): {flags}")


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(args) -> dict:
    conf = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    conf["command"] = args.command + (f" {args.eval_command}" if args.command == "eval" else "")
    return conf


def _write_resolved(args, out: Path) -> None:
    with open(out / RESOLVED, "w", encoding="utf-8") as fh:
        json.dump(_resolved(args), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_reports(reports, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(fairmetrics.reports_to_csv(reports))
        return
    _write_text(out / REPORT_JSON, fairmetrics.reports_to_json(reports))
    _write_text(out / REPORT_CSV, fairmetrics.reports_to_csv(reports))


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    _require(args, "dim", "out")
    if not 0.0 <= args.angle <= 90.0:
        raise UsageError(f"--angle must lie in [0, 90], got {args.angle}")
    cfg = SynthConfig(
        dim=args.dim, concepts=args.concepts, samples_per_concept=args.samples_per_concept,
        gallery_per_concept=args.gallery_per_concept, axes=_parse_axes(args.axes),
        angle_deg=args.angle, magnitude=args.magnitude, noise=args.noise,
        stereotype=args.stereotype, aligned=args.aligned,
        binary_antipodal=args.binary_antipodal, seed=args.seed,
    )
    data = generate(cfg)
    out = _out_dir(args)
    save_set(data.train, out / "train")
    save_set(data.text_set, out / "prompts")
    save_set(data.gallery, out / "gallery")
    save_set(data.queries, out / "queries")
    save_set(data.attribute_prompts, out / "attribute_prompts")
    save_truth(data.truth, out / "truth.json")
    _write_resolved(args, out)
    print(f"wrote {len(data.train)} train, {len(data.gallery)} gallery, "
          f"{len(data.queries)} query rows to {out}")
    return 0


# ---------------------------------------------------------------- train

def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, queue_size=args.queue_size, alpha=args.alpha,
        temperature=args.temperature, learning_rate=args.lr, steps=args.steps,
        seed=args.seed, axes=tuple(_axis_list(args.axes)),
    )


def cmd_train(args) -> int:
    _require(args, "data", "out")
    cfg = _train_config(args)
    dataset = load_set(args.data)
    state = None
    if args.resume is not None:
        state, saved = load_state(args.resume)
        if {**saved.to_json(), "steps": 0} != {**cfg.to_json(), "steps": 0}:
            raise UsageError("--resume state was produced with a different configuration")
        if state.step > cfg.steps:
            raise UsageError(f"resume state is at step {state.step}, beyond --steps {cfg.steps}")
    result = train(dataset, cfg, state)
    out = _out_dir(args)
    save_checkpoint(result.params, out / CHECKPOINT, seed=cfg.seed, step=result.state.step)
    write_history_csv(result.history, out / LOSSES)
    save_state(result.state, cfg, out / STATE)
    _write_resolved(args, out)
    if result.history:
        _, l_ba, l_cd, l_total = result.history[-1]
        print(f"step {result.state.step}: l_ba={l_ba:.6f} l_cd={l_cd:.6f} l_total={l_total:.6f}")
    return 0


# ---------------------------------------------------------------- debias

def _select_rows(emb_set: LabeledEmbeddingSet, modality: str) -> np.ndarray:
    if modality == "both":
        return np.ones(len(emb_set), dtype=bool)
    return emb_set.modality_mask(modality)


def _debias_ba(emb_set, checkpoint, modality):
    params, _ = load_checkpoint(checkpoint)
    debiased = apply_debias(emb_set, params)
    if modality == "both":
        return debiased
    rows = _select_rows(emb_set, modality)
    matrix = np.where(rows[:, None], debiased.matrix, emb_set.matrix)
    return emb_set.with_matrix(matrix, transform="ba-debias")


def _projection_pairs(pair_set: LabeledEmbeddingSet, axis, seed):
    if axis is None:
        pairs = baselines.text_prompt_pairs(pair_set)
        if not pairs:
            raise UsageError("--pairs set has no counterfactual links; pass --axis to pair on it")
        return pairs
    text = pair_set.select(pair_set.modality_mask("text"))
    mapping = pair_counterfactuals(text, [axis], seed)
    seen, pairs = set(), []
    for a, b in mapping.items():
        key = frozenset((a, b))
        if key not in seen:
            seen.add(key)
            pairs.append((text.row(a), text.row(b)))
    return pairs


def _check_method_flags(args):
    given = {
        "checkpoint": args.checkpoint is not None,
        "clip_m": args.clip_m is not None,
        "pairs": args.pairs is not None,
    }
    wanted = {"ba": "checkpoint", "clipclip": "clip_m", "projection": "pairs"}[args.method]
    if not given[wanted]:
        raise UsageError(f"--method {args.method} needs --{wanted.replace('_', '-')}")
    extra = [k for k, v in given.items() if v and k != wanted]
    if extra:
        raise UsageError(f"--method {args.method} does not take --{extra[0].replace('_', '-')}")


def cmd_debias(args) -> int:
    _require(args, "input", "method", "out")
    _check_method_flags(args)
    emb_set = load_set(args.input)
    out = _out_dir(args)
    if args.method == "ba":
        result = _debias_ba(emb_set, args.checkpoint, args.modality)
    elif args.method == "clipclip":
        if args.modality != "both":
            raise UsageError("clipclip removes dimensions from both modalities; use --modality both")
        source = load_set(args.mi_source) if args.mi_source else emb_set
        dims = baselines.mi_rank(source, args.clip_axis, args.bins)
        baselines.save_clip_dims(dims, out / "clip_dims.json")
        result = baselines.clip_apply(emb_set, dims, args.clip_m)
    else:
        proj = baselines.projection_fit(_projection_pairs(load_set(args.pairs), args.axis, args.seed))
        baselines.save_projection(proj, out / "projection.json")
        result, flagged = baselines.projection_apply(emb_set, proj, args.modality,
                                                     return_flagged=True)
        if flagged:
            print(f"warning: {len(flagged)} rows projected to zero and were kept as is",
                  file=sys.stderr)
    save_set(result, out / DEBIASED)
    _write_resolved(args, out)
    print(f"wrote {len(result)} rows (dim {result.dim}) to {out / DEBIASED}")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval_fairness(args) -> int:
    _require(args, "queries", "gallery")
    queries, gallery = load_set(args.queries), load_set(args.gallery)
    rep = fairmetrics.FairnessReport(method=args.method, k=args.k)
    for axis in _axis_list(args.axes):
        runs = fairmetrics.retrieval_runs(queries, gallery, axis, args.k)
        ms, ms_per = fairmetrics.mean_maxskew(runs, args.k, args.threads)
        nd, nd_per = fairmetrics.mean_ndkl(runs, args.k, args.threads)
        rep.fairness[axis] = (ms, nd)
        rep.per_query[axis] = [{"query": r.query_id, "maxskew": a, "ndkl": b}
                               for r, a, b in zip(runs, ms_per, nd_per)]
    return _finish_eval(args, [rep])


def cmd_eval_retrieval(args) -> int:
    _require(args, "queries", "gallery", "prompts")
    queries, gallery, prompts = (load_set(p) for p in (args.queries, args.gallery, args.prompts))
    rep = fairmetrics.FairnessReport(method=args.method, k=args.k)
    rep.recall_ir = fairmetrics.concept_recall_at_k(queries, gallery, args.k)
    rep.recall_tr = fairmetrics.concept_recall_at_k(gallery, prompts, args.k)
    return _finish_eval(args, [rep])


def cmd_eval_zeroshot(args) -> int:
    _require(args, "gallery", "prompts")
    gallery, prompts = load_set(args.gallery), load_set(args.prompts)
    ks = (1, 5) if len(prompts) >= 5 else (1,)
    accs = fairmetrics.concept_zeroshot(gallery, prompts, ks)
    rep = fairmetrics.FairnessReport(method=args.method, k=args.k, top1=accs[0],
                                     top5=accs[1] if len(accs) > 1 else None)
    return _finish_eval(args, [rep])


def _maxskew_column(header: list[str]) -> str:
    for name in header:
        if name == "MS" or name.endswith(" MS"):
            return name
    raise UsageError("metrics CSV has no MaxSkew column (named 'MS' or '<dataset> MS')")


def cmd_eval_able(args) -> int:
    out = _out_dir(args)
    if args.metrics is None:
        _require(args, "acc", "maxskew")
        value = fairmetrics.able(args.acc, args.maxskew)
        print(f"{value:.2f}")
        if out is not None:
            _write_text(out / REPORT_JSON, json.dumps(
                {"acc": args.acc, "maxskew": args.maxskew, "able": value}, indent=2, sort_keys=True) + "\n")
            _write_resolved(args, out)
        return 0
    if args.acc is not None or args.maxskew is not None:
        raise UsageError("--metrics cannot be combined with --acc/--maxskew")
    with open(args.metrics, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError("metrics CSV has no rows")
    header = list(rows[0])
    if "Top-1" not in header:
        raise UsageError("metrics CSV has no Top-1 column")
    ms_col = _maxskew_column(header)
    fields = header + ([] if "ABLE" in header else ["ABLE"])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        try:
            acc, ms = float(row["Top-1"]) / 100.0, float(row[ms_col])
        except ValueError as exc:
            raise ConfigError(f"non-numeric metric in row {row}: {exc}") from exc
        w.writerow({**row, "ABLE": f"{fairmetrics.able(acc, ms):.4f}"})
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        _write_text(out / REPORT_CSV, buf.getvalue())
        _write_resolved(args, out)
    return 0


def cmd_eval_weat(args) -> int:
    _require(args, "x", "y", "a", "b")
    X, Y, A, B = (load_set(p).matrix for p in (args.x, args.y, args.a, args.b))
    res = fairmetrics.effect_size(X, Y, A, B, n_permutations=args.permutations, seed=args.seed)
    rep = fairmetrics.FairnessReport(method=args.method, k=args.k)
    rep.effect_sizes["weat"] = {
        "effect_size": res.effect_size, "p_value": res.p_value,
        "n_permutations": res.n_permutations, "exact": res.exact, "sizes": list(res.sizes),
    }
    print(f"d={res.effect_size:.4f} p={res.p_value:.4f}")
    out = _out_dir(args)
    if out is not None:
        _write_text(out / REPORT_JSON, fairmetrics.reports_to_json([rep]))
        _write_resolved(args, out)
    return 0


def _finish_eval(args, reports) -> int:
    out = _out_dir(args)
    _write_reports(reports, out)
    if out is not None:
        _write_resolved(args, out)
    return 0


# ---------------------------------------------------------------- report

def _export_embeddings(path: Path, sets: dict[str, LabeledEmbeddingSet]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = max(s.dim for s in sets.values())
    w.writerow(["set", "id", "modality", "concept", "attributes"] + [f"x{j}" for j in range(dim)])
    for name, emb_set in sets.items():
        for lab, row in zip(emb_set.labels, emb_set.matrix):
            w.writerow([name, lab.id, lab.modality, lab.concept,
                        json.dumps(lab.attributes, sort_keys=True)]
                       + [repr(float(v)) for v in row] + [""] * (dim - row.size))
    _write_text(path, buf.getvalue())


def cmd_report(args) -> int:
    _require(args, "queries", "gallery", "prompts", "out")
    sets = {"queries": load_set(args.queries), "gallery": load_set(args.gallery),
            "prompts": load_set(args.prompts)}
    axes = _axis_list(args.axes)
    variants = {"original": sets}
    if args.clip_m is not None:
        source = load_set(args.mi_source) if args.mi_source else sets["gallery"]
        dims = baselines.mi_rank(source, args.clip_axis, args.bins)
        variants["clipclip"] = {k: baselines.clip_apply(v, dims, args.clip_m) for k, v in sets.items()}
    if args.pairs is not None:
        proj = baselines.projection_fit(_projection_pairs(load_set(args.pairs), args.axis, args.seed))
        variants["projection"] = {k: baselines.projection_apply(v, proj, "text") for k, v in sets.items()}
    if args.checkpoint is not None:
        params, _ = load_checkpoint(args.checkpoint)
        variants["ba"] = {k: apply_debias(v, params) for k, v in sets.items()}
    reports = []
    for method, vs in variants.items():
        reports.append(fairmetrics.evaluate(vs["queries"], vs["gallery"], vs["prompts"], axes,
                                            k=args.k, method=method, recall_k=args.recall_k,
                                            threads=args.threads))
    out = _out_dir(args)
    _write_reports(reports, out)
    if args.export_embeddings:
        for method, vs in variants.items():
            _export_embeddings(out / f"embeddings_{method}.csv", vs)
    _write_resolved(args, out)
    for rep in reports:
        ms = ", ".join(f"{a} MS={v[0]:.4f}" for a, v in rep.fairness.items())
        print(f"{rep.method}: {ms}, Top-1={rep.top1:.2f}, ABLE={rep.able:.2f}")
    return 0


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, *, out_required=False):
    p.add_argument("--config", help="JSON file whose keys provide defaults for these flags")
    p.add_argument("--out", help="output directory" + (" (required)" if out_required else ""))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")


def _method_flags(p):
    p.add_argument("--checkpoint", help="bias-alignment checkpoint (.bamod)")
    p.add_argument("--clip-m", type=int, help="number of dimensions to clip")
    p.add_argument("--clip-axis", default="gender", help="attribute axis ranked for clipping")
    p.add_argument("--mi-source", help="set with labeled images used to rank dimensions")
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--pairs", help="text set whose counterfactual prompts define the projection")
    p.add_argument("--axis", help="pair --pairs text rows on this axis instead of stored links")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vldebias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic biased embedding corpus")
    _common(p, out_required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--samples-per-concept", type=int, default=100)
    p.add_argument("--gallery-per-concept", type=int, default=200)
    p.add_argument("--axes", default="gender", help="'gender', 'universal' or name=v1,v2;...")
    p.add_argument("--angle", type=float, default=45.0, help="cross-modal angle in degrees")
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--stereotype", type=float, default=0.5)
    p.add_argument("--aligned", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--binary-antipodal", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train the bias-alignment network")
    _common(p, out_required=True)
    p.add_argument("--data", help="training set (text prompts + images)")
    p.add_argument("--axes", default="gender", help="comma-separated attribute axes")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--queue-size", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--resume", help="train_state.npz of an earlier run to continue")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("debias", help="apply a debiasing method to a set")
    _common(p, out_required=True)
    p.add_argument("--input", help="set to debias")
    p.add_argument("--method", choices=("ba", "clipclip", "projection"))
    p.add_argument("--modality", choices=("text", "image", "both"), default="both")
    _method_flags(p)
    p.set_defaults(handler=cmd_debias)

    p = sub.add_parser("eval", help="compute metrics")
    esub = p.add_subparsers(dest="eval_command", required=True, parser_class=_Parser)
    specs = {
        "fairness": cmd_eval_fairness, "retrieval": cmd_eval_retrieval,
        "zeroshot": cmd_eval_zeroshot, "able": cmd_eval_able, "weat": cmd_eval_weat,
    }
    for name, handler in specs.items():
        e = esub.add_parser(name)
        _common(e)
        e.add_argument("--method", default="original", help="method label in reports")
        e.add_argument("--k", type=int, default=100 if name == "fairness" else 5)
        e.set_defaults(handler=handler)
        if name in ("fairness", "retrieval"):
            e.add_argument("--queries")
        if name in ("fairness", "retrieval", "zeroshot"):
            e.add_argument("--gallery")
        if name in ("retrieval", "zeroshot"):
            e.add_argument("--prompts")
        if name == "fairness":
            e.add_argument("--axes", default="gender")
        if name == "able":
            e.add_argument("--acc", type=float, help="top-1 accuracy as a fraction")
            e.add_argument("--maxskew", type=float)
            e.add_argument("--metrics", help="CSV with Top-1 (percent) and MS columns")
        if name == "weat":
            for flag in ("x", "y", "a", "b"):
                e.add_argument(f"--{flag}", help=f"set {flag.upper()}")
            e.add_argument("--permutations", type=int, default=10_000)

    p = sub.add_parser("report", help="full metric table for the original and debiased sets")
    _common(p, out_required=True)
    p.add_argument("--queries")
    p.add_argument("--gallery")
    p.add_argument("--prompts")
    p.add_argument("--axes", default="gender")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--recall-k", type=int, default=5)
    _method_flags(p)
    p.add_argument("--export-embeddings", action="store_true",
                   help="also write raw coordinates per method for external plotting")
    p.set_defaults(handler=cmd_report)
    return parser


def _leaf_parser(parser, argv):
    """The subparser that will handle ``argv``, for applying config defaults."""
    args, _ = parser.parse_known_args(argv)
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    leaf = action.choices[args.command]
    if args.command == "eval":
        inner = next(a for a in leaf._actions if isinstance(a, argparse._SubParsersAction))
        leaf = inner.choices[args.eval_command]
    return args, leaf


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args, leaf = _leaf_parser(parser, argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from exc
        known = {a.dest for a in leaf._actions}
        defaults = {}
        for key, value in conf.items():
            dest = key.replace("-", "_")
            if dest == "command":
                continue
            if dest not in known or dest in ("help", "config"):
                raise UsageError(f"unknown config key {key!r}")
            defaults[dest] = value
        leaf.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            return args.handler(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (VLDebiasError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
