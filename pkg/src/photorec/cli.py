"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_factors
from .data import DataFormatError, atomic_write_text, parse_splits
from .evaluation import RecommendationQuery
from .metric import DEFAULT_ORDER, LevelOrder, MarginSet
from .mining import DEFAULT_TTHR, ClusterConfig, format_attractions, format_interactions, format_members, parse_interactions
from .model import HEADS, VARIANTS, TrainingConfig
from .attention import POOLING_MODES
from .pipeline import (
    VARIANT_PRESETS,
    InputError,
    Pipeline,
    PipelineConfig,
    StageError,
    evaluation_tsv,
    metrics_tsv,
    read_features,
    read_photos,
    segments_tsv,
)
from .synthetic import S1, S1_TRAINING, S1_WMF, SyntheticSpec, gen_synthetic
from .training import Corpus, evaluate_splits, recommend, train
from .wmf import WmfConfig, factorize

log = logging.getLogger("photorec")

_TRAIN = TrainingConfig()
_WMF = WmfConfig()
_CLUSTER = ClusterConfig()
_MARGINS = ",".join(f"{m:g}" for m in MarginSet().as_array())


# -- flag groups ----------------------------------------------------------------
# Model flags default to None so that config-file values survive unless a flag
# is given; the documented defaults are the ones the dataclasses use.

def _add_cluster_flags(p):
    g = p.add_argument_group("attraction mining")
    g.add_argument("--eps", type=float, help=f"neighbourhood radius in metres (default {_CLUSTER.eps_meters:g})")
    g.add_argument("--min-users", type=int, help=f"distinct users for a dense point (default {_CLUSTER.min_users})")
    g.add_argument("--tthr", type=int,
                   help=f"visit grouping threshold in seconds (default {DEFAULT_TTHR} = {DEFAULT_TTHR // 3600} h)")
    g.add_argument("--cities", help="optional cities.tsv of bounding boxes used to label photos")


def _add_wmf_flags(p):
    g = p.add_argument_group("matrix factorization")
    g.add_argument("--f", type=int, help=f"latent factor length (default {_WMF.f})")
    g.add_argument("--gamma", type=float, help=f"confidence weight on visit counts (default {_WMF.gamma:g})")
    g.add_argument("--lambda1", type=float, help=f"factor regularization (default {_WMF.lambda1:g})")
    g.add_argument("--sweeps", type=int, help=f"ALS sweeps (default {_WMF.sweeps})")


def _add_train_flags(p, variant=True):
    g = p.add_argument_group("joint training")
    if variant:
        g.add_argument("--variant", choices=VARIANTS, help=f"objective variant (default {_TRAIN.variant})")
        g.add_argument("--pooling", choices=POOLING_MODES, help=f"photo pooling (default {_TRAIN.pooling})")
    g.add_argument("--config", help="training config JSON; flags override its values")
    g.add_argument("--epochs", type=int, help=f"training epochs (default {_TRAIN.epochs})")
    g.add_argument("--lr", type=float, help=f"Adam step size (default {_TRAIN.lr:g})")
    g.add_argument("--batch-size", type=int, help="users per Adam step, 0 = all users (default 0)")
    g.add_argument("--neg-ratio", type=float,
                   help="sampled negatives per positive in the prediction loss, 0 = all pairs (default 0)")
    g.add_argument("--d", type=int, help=f"photo embedding length (default {_TRAIN.d})")
    g.add_argument("--hidden", help=f"encoder hidden widths, comma separated (default {','.join(map(str, _TRAIN.hidden))})")
    g.add_argument("--omega", type=int, help=f"attention weight vector length (default {_TRAIN.omega})")
    g.add_argument("--u-pho", type=int, help=f"photos per user stack (default {_TRAIN.u_pho})")
    g.add_argument("--l-pho", type=int, help=f"photos per attraction stack (default {_TRAIN.l_pho})")
    g.add_argument("--lambda2", type=float, help=f"parameter regularization (default {_TRAIN.lambda2:g})")
    g.add_argument("--margins", help=f"quintuplet margins m1..m6 (default {_MARGINS})")
    g.add_argument("--level-order", help=f"similarity ranking of the four roles (default {','.join(DEFAULT_ORDER)})")
    g.add_argument("--head", choices=HEADS, help=f"prediction head (default {_TRAIN.head})")
    g.add_argument("--head-hidden", type=int, help=f"hidden width of the mlp head (default {_TRAIN.head_hidden})")
    g.add_argument("--finetune-latents", action="store_true", default=None,
                   help="also update the latent factors during joint training (default off)")
    g.add_argument("--user-noise-photos", action="store_true", default=None,
                   help="include photos outside every attraction in user stacks (default off)")
    g.add_argument("--select-best", action="store_true", default=None,
                   help="keep the parameters of the epoch with the best validation MAP@5 (default off)")
    g.add_argument("--preset", choices=("S1",), help="start from the desk-scale settings used with benchmark S1")


def _load_config_file(path) -> dict:
    if not path:
        return {}
    if not os.path.isfile(path):
        raise InputError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a JSON object")
    return doc


def _configs(args, seed_fields=True):
    """(TrainingConfig, WmfConfig, ClusterConfig, t_thr) from preset < config file < flags."""
    doc = _load_config_file(getattr(args, "config", None))
    training = dict(doc.get("training", {k: v for k, v in doc.items() if k not in ("wmf", "cluster", "t_thr")}))
    wmf = dict(doc.get("wmf", {}))
    cluster = dict(doc.get("cluster", {}))
    t_thr = doc.get("t_thr", DEFAULT_TTHR)
    if getattr(args, "preset", None) == "S1":
        training = {**S1_TRAINING, **training}
        wmf = {**S1_WMF, **wmf}
    flag_map = {
        "variant": "variant", "pooling": "pooling", "epochs": "epochs", "lr": "lr", "batch_size": "batch_size",
        "neg_ratio": "neg_ratio", "d": "d", "omega": "omega", "u_pho": "u_pho", "l_pho": "l_pho",
        "lambda2": "lambda2", "head": "head", "head_hidden": "head_hidden", "finetune_latents": "finetune_latents",
        "user_noise_photos": "user_noise_photos", "select_best": "select_best",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            training[key] = v
    if getattr(args, "hidden", None) is not None:
        training["hidden"] = tuple(int(h) for h in args.hidden.split(",") if h)
    if getattr(args, "margins", None) is not None:
        training["margins"] = [float(m) for m in args.margins.split(",")]
    if getattr(args, "level_order", None) is not None:
        training["level_order"] = LevelOrder.parse(args.level_order).ranks
    for flag in ("f", "gamma", "lambda1", "sweeps"):
        v = getattr(args, flag, None)
        if v is not None:
            wmf[flag] = v
    if getattr(args, "eps", None) is not None:
        cluster["eps_meters"] = args.eps
    if getattr(args, "min_users", None) is not None:
        cluster["min_users"] = args.min_users
    if getattr(args, "tthr", None) is not None:
        t_thr = args.tthr
    if seed_fields:
        training["seed"] = args.seed
        wmf["seed"] = args.seed
    try:
        return (TrainingConfig.from_dict(training), WmfConfig(**wmf), ClusterConfig(**cluster), int(t_thr))
    except TypeError as exc:
        raise InputError(f"bad configuration: {exc}") from None


def _need_file(path, what="input file"):
    if not path or not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _read_interactions(path):
    with open(_need_file(path), encoding="utf-8") as fh:
        return parse_interactions(fh)


def _read_splits(path, one_per_user=False):
    with open(_need_file(path), encoding="utf-8") as fh:
        splits = parse_splits(fh)
    if one_per_user:
        seen = {}
        for s in splits:
            if s.user_id in seen:
                raise InputError(f"{path}: user {s.user_id!r} has several splits; train one model per fold")
            seen[s.user_id] = s
    return splits


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


# -- subcommands ----------------------------------------------------------------

def cmd_cluster(args):
    _, _, cluster, t_thr = _configs(args, seed_fields=False)
    photos = read_photos(_need_file(args.photos), args.cities and _need_file(args.cities))
    corpus = Corpus(photos, features=None, t_thr=t_thr).prepare(cluster)
    atomic_write_text(args.out_attractions, format_attractions(corpus.attractions))
    atomic_write_text(args.out_interactions, format_interactions(corpus.interactions))
    if args.out_members:
        atomic_write_text(args.out_members, format_members(corpus.attractions))
    print(f"{len(corpus.attractions)} attractions, {len(corpus.interactions.users)} users with visits")


def cmd_factorize(args):
    _, wmf, _, _ = _configs(args)
    inter = _read_interactions(args.interactions)
    factors = factorize(inter.counts, wmf)
    save_factors(factors, inter.users, inter.attractions, wmf, args.out)
    print(f"objective {factors.trace[0]:.6g} -> {factors.trace[-1]:.6g} after {wmf.sweeps} sweeps")


def cmd_train(args):
    training, wmf, cluster, t_thr = _configs(args)
    photos = read_photos(_need_file(args.photos), args.cities and _need_file(args.cities))
    features = read_features(_need_file(args.features))
    corpus = Corpus(photos, features, t_thr=t_thr)
    if args.interactions:
        corpus.interactions = _read_interactions(args.interactions)
    corpus = corpus.prepare(cluster)
    held = {}
    if args.splits:
        held = {s.user_id: s for s in _read_splits(args.splits, one_per_user=True)}
    model = train(corpus, training, wmf, cluster, held)
    save_checkpoint(model, args.out)
    if args.metrics:
        atomic_write_text(args.metrics, metrics_tsv(model))
    last = model.trace[-1] if model.trace else None
    print(f"trained {training.variant}/{training.pooling} for {training.epochs} epochs"
          + (f"; final total {last.total:.6g}, val MAP@5 {last.val_map5:.4f}" if last else ""))


def cmd_evaluate(args):
    model = load_checkpoint(_need_file(args.model, "model file"))
    inter = _read_interactions(args.interactions)
    if list(inter.users) != model.users or [int(a) for a in inter.attractions] != model.attractions:
        raise InputError("interaction table does not match the users/attractions the model was trained on")
    splits = _read_splits(args.splits)
    ap = evaluate_splits(model, splits, inter.counts, args.k, args.conventional_ap)
    atomic_write_text(args.out, evaluation_tsv(model.config.variant, ap))
    if args.segments:
        atomic_write_text(args.segments, segments_tsv(ap))
    sys.stdout.write(evaluation_tsv(model.config.variant, ap))


def cmd_recommend(args):
    model = load_checkpoint(_need_file(args.model, "model file"))
    query = RecommendationQuery(args.user, args.city, args.k)
    try:
        ranked = recommend(query, model, allow_visited=args.allow_visited)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from None
    probs = dict(zip(model.attractions, model.probabilities()[model.users.index(args.user)]))
    print("rank\tattraction_id\tprobability")
    for r, a in enumerate(ranked, 1):
        print(f"{r}\t{a}\t{probs[a]:.6f}")


def _pipeline_config(args) -> PipelineConfig:
    training, wmf, cluster, t_thr = _configs(args)
    return PipelineConfig(
        photos=args.photos, features=args.features, out_dir=args.out_dir, cities=args.cities,
        t_thr=t_thr, min_cities=args.min_cities, n_folds=args.n_folds, ks=args.k,
        conventional_ap=args.conventional_ap, seed=args.seed, cluster=cluster, wmf=wmf, training=training,
    )


def cmd_run_pipeline(args):
    cfg = _pipeline_config(args)
    if args.dry_run:
        cfg.validate()
        print("configuration valid; nothing written")
        return
    ap = Pipeline(cfg).run()
    sys.stdout.write(evaluation_tsv(cfg.training.variant, ap))


def cmd_ablate(args):
    cfg = _pipeline_config(args)
    names = [v for v in args.variants.split(",") if v]
    if args.dry_run:
        cfg.validate()
        unknown = [n for n in names if n not in VARIANT_PRESETS]
        if unknown:
            raise InputError(f"unknown variants {unknown}")
        print("configuration valid; nothing written")
        return
    rows = Pipeline(cfg).ablate(names, args.alpha)
    from .evaluation import format_report
    sys.stdout.write(format_report(rows, cfg.ks))


def cmd_gen_synthetic(args):
    base = S1 if args.preset == "S1" else SyntheticSpec()
    fields = {k: getattr(args, k) for k in SyntheticSpec.__dataclass_fields__ if getattr(args, k, None) is not None}
    fields["seed"] = args.seed
    spec = SyntheticSpec(**{**base.__dict__, **fields})
    if args.dry_run:
        print("spec valid; nothing written")
        return
    data = gen_synthetic(spec)
    paths = data.write(args.out_dir)
    print(f"{len(data.photos)} photos written to {os.path.dirname(paths['photos.tsv']) or '.'}")


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads (default: library default)")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and configuration, write nothing")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="photorec", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="Exit codes: 0 success, 1 internal error, 2 usage or input error.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("cluster", parents=[common], help="mine attractions and visit counts from photos.tsv")
    p.add_argument("--photos", required=True)
    _add_cluster_flags(p)
    p.add_argument("--out-attractions", required=True)
    p.add_argument("--out-interactions", required=True)
    p.add_argument("--out-members", help="optional photo -> attraction membership table")
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("factorize", parents=[common], help="weighted matrix factorization of interactions.tsv")
    p.add_argument("--interactions", required=True)
    _add_wmf_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_factorize)

    p = sub.add_parser("train", parents=[common], help="factorize, then jointly train the visit predictor")
    p.add_argument("--photos", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--interactions", help="visit counts (default: derived from the photos)")
    p.add_argument("--splits", help="held-out (validation, test) cities, at most one split per user")
    p.add_argument("--out", required=True, help="model checkpoint (JSON)")
    p.add_argument("--metrics", help="per-epoch TSV log")
    _add_cluster_flags(p)
    _add_wmf_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="test MAP@k of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--interactions", required=True, help="full visit counts (relevance ground truth)")
    p.add_argument("--splits", required=True)
    p.add_argument("--k", type=_ks, default=(5, 10), help="cut-offs, comma separated (default 5,10)")
    p.add_argument("--conventional-ap", action="store_true", help="standard AP@k instead of the all-ranks average")
    p.add_argument("--out", required=True, help="report TSV")
    p.add_argument("--segments", help="per-split AP TSV")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("recommend", parents=[common], help="top-k attractions in a city for a user")
    p.add_argument("--model", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--city", required=True)
    p.add_argument("--k", type=int, default=10, help="list length (default 10)")
    p.add_argument("--allow-visited", action="store_true", help="allow cities the user visited in training")
    p.set_defaults(fn=cmd_recommend)

    for name, fn, hlp in (("run-pipeline", cmd_run_pipeline, "cluster, split, train and evaluate in one go"),
                          ("ablate", cmd_ablate, "train and compare several variants on identical splits")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--photos", required=True)
        p.add_argument("--features", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--n-folds", type=int, default=1, help="training runs, each holding out one split per user (default 1)")
        p.add_argument("--min-cities", type=int, default=3, help="cities a user needs to be evaluated (default 3)")
        p.add_argument("--k", type=_ks, default=(5, 10), help="cut-offs, comma separated (default 5,10)")
        p.add_argument("--conventional-ap", action="store_true", help="standard AP@k instead of the all-ranks average")
        _add_cluster_flags(p)
        _add_wmf_flags(p)
        _add_train_flags(p, variant=(name == "run-pipeline"))
        if name == "ablate":
            p.add_argument("--variants", default="MEAL,no-visual-similarity,U,L,U/L,U&L,MEAL-max,MEAL-average",
                           help="comma separated (default: all eight)")
            p.add_argument("--alpha", type=float, default=0.05, help="t-test level (default 0.05)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a planted synthetic photo collection")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=("S1",), help="benchmark S1 settings as the starting point")
    for name, f in SyntheticSpec.__dataclass_fields__.items():
        if name == "seed":
            continue
        default = getattr(SyntheticSpec(), name)
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=type(default), help=f"(default {default})")
    p.set_defaults(fn=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            if args.dry_run and args.fn in (cmd_cluster, cmd_factorize, cmd_train, cmd_evaluate, cmd_recommend):
                _configs(args)
                for attr in ("photos", "features", "interactions", "splits", "model", "cities"):
                    if getattr(args, attr, None):
                        _need_file(getattr(args, attr))
                print("inputs valid; nothing written")
                return 0
            args.fn(args)
    except StageError as exc:
        print(f"photorec: error: {exc}", file=sys.stderr)
        return exc.code
    except (InputError, DataFormatError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"photorec: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"photorec: internal error: {exc}", file=sys.stderr)
        return 1
    return 0
