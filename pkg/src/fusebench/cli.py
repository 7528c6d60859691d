"""Command line entry point: ``fusebench <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import calibration as cal
from . import metrics
from .core import (
    DataError, Embedding, ScoreTable, SystemScore, TrialRecord, atomic_write, fmt_float, format_embeddings,
    format_key, format_score_table, load_embeddings, load_key, load_score_table, load_trial_list,
)
from .normalization import DEFAULT_TOP_K, Cohort
from .quality import TrainConfig, load_params as load_qnet, predict_qualities, save_params as save_qnet
from .quality import train_quality_net

log = logging.getLogger("fusebench")

SEED_ENV = "FUSEBENCH_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _load_config(path):
    from .synth import SynthConfig

    if path is None:
        return SynthConfig()
    import tomli

    with open(path, "rb") as fh:
        try:
            values = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise DataError(f"{path}: {exc}") from None
    return SynthConfig.from_mapping(values)


def cmd_synth(args) -> None:
    from .bench import build_data, enrollment_and_pool, gen_trials, SPLITS

    cfg = _load_config(args.config).with_(seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    data = build_data(cfg)
    rng, split, obs = data["rng"], data["split"], data["observations"]
    trials = {s: gen_trials(cfg, s, split[s], obs, rng) for s in SPLITS}

    def out(name):
        return os.path.join(args.out_dir, name)

    noise_lines = []
    for m in ("speaker", "face"):
        train = [e for i in split["quality"] for e in obs[m][i]]
        cohort = [e for i in split["cohort"] for e in obs[m][i]]
        enroll = []
        for s in SPLITS:
            for i in split[s]:
                for k, e in enumerate(enrollment_and_pool(cfg, obs[m][i])[0]):
                    enroll.append(Embedding(f"enr_{i}/{k}", m, e.values, i, e.true_noise))
        test = [seg for s in SPLITS for t in trials[s] for seg in t.segments[m]]
        for name, embs in (("quality", train), ("cohort", cohort), ("enroll", enroll), ("test", test)):
            atomic_write(out(f"{name}_{m}.tsv"), format_embeddings(embs, m))
            noise_lines += [f"{m}\t{e.id}\t{fmt_float(e.true_noise)}\n" for e in embs]
    atomic_write(out("true_noise.tsv"), "".join(noise_lines))
    for s in SPLITS:
        atomic_write(out(f"trials_{s}.key"),
                     format_key((f"enr_{t.enroll}", t.test_id, t.label) for t in trials[s]))
    log.info("wrote synthetic data to %s", args.out_dir)


def cmd_train_quality(args) -> None:
    embs = load_embeddings(args.embeddings)
    cfg = TrainConfig(tuple_size=args.tuple_size, epochs=args.epochs, learning_rate=args.lr,
                      seed=args.seed, scale=args.scale, margin=args.margin, hidden=args.hidden)
    params = train_quality_net(embs, cfg)
    save_qnet(params, args.out)
    for i, loss in enumerate(params.history, start=1):
        log.info("epoch %d mean loss %.6f", i, loss)


def cmd_predict_quality(args) -> None:
    params = load_qnet(args.params)
    embs = load_embeddings(args.embeddings)
    rows = predict_qualities(params, embs)
    atomic_write(args.out, "".join(f"{i}\t{fmt_float(q)}\n" for i, q in rows))


def _recordings(path, qnet):
    from .scoring import recordings

    return recordings(load_embeddings(path), qnet)


def cmd_score(args) -> None:
    from .scoring import score_pairs

    qnet = load_qnet(args.use_quality) if args.use_quality else None
    enroll = _recordings(args.enroll, qnet)
    test = _recordings(args.test, qnet)
    pairs = load_trial_list(args.trials)
    cohort = Cohort(np.vstack([e.values for e in load_embeddings(args.cohort)]), args.top_k) if args.cohort else None
    table = score_pairs(pairs, enroll, test, args.system, args.k_max, args.ahc_threshold, cohort, args.threads)
    atomic_write(args.out, format_score_table(table))


def cmd_norm(args) -> None:
    from .scoring import norm_table

    qnet = load_qnet(args.use_quality) if args.use_quality else None
    table = load_score_table(args.scores)
    cohort = Cohort(np.vstack([e.values for e in load_embeddings(args.cohort)]), args.top_k)
    normed = norm_table(table, _recordings(args.enroll, qnet), _recordings(args.test, qnet), cohort)
    atomic_write(args.out, format_score_table(normed))


def _pick_system(table: ScoreTable, name):
    if name is None:
        if len(table.roster) != 1:
            raise DataError(f"several systems {list(table.roster)}; choose one with --system")
        return table.roster[0]
    if name not in table.roster:
        raise DataError(f"system {name!r} not in {list(table.roster)}")
    return name


def cmd_calibrate(args) -> None:
    table = load_score_table(args.scores, args.key)
    system = _pick_system(table, args.system)
    params = cal.calibrate(table, system, args.p_tar, args.ridge)
    if args.params_out:
        cal.save_params(params, args.params_out)
    if args.out:
        target = load_score_table(args.apply) if args.apply else table
        a, d = params.coef[system][0], params.offset
        recs = []
        for r in target.records:
            s = r.systems[system]
            recs.append(TrialRecord(r.enroll_id, r.test_id, r.label,
                                    {system: SystemScore(a * s.score + d, s.q_enroll, s.q_test)}))
        atomic_write(args.out, format_score_table(ScoreTable(recs, (system,))))


def _parse_use_q(spec, roster):
    if not spec:
        return {}
    if spec == "all":
        return {s: True for s in roster}
    names = [s for s in spec.split(",") if s]
    unknown = [s for s in names if s not in roster]
    if unknown:
        raise DataError(f"--use-q names unknown systems {unknown}")
    return {s: True for s in names}


def cmd_fuse(args) -> None:
    if args.rule == "sum":
        table = load_score_table(args.apply or args.scores)
        atomic_write(args.out, format_score_table(cal.sum_fuse(table, args.name)))
        return
    if args.params:
        params = cal.load_params(args.params)
    else:
        if not args.key:
            raise DataError("--key is required to train LR fusion (or pass --params)")
        train = load_score_table(args.scores, args.key)
        params, _ = cal.fuse_with_qualities(train, args.p_tar, _parse_use_q(args.use_q, train.roster),
                                            args.ridge)
        if args.params_out:
            cal.save_params(params, args.params_out)
    target = load_score_table(args.apply or args.scores)
    atomic_write(args.out, format_score_table(cal.apply_fusion(params, target, args.name)))


def _metrics_rows(table: ScoreTable, p_tar: float) -> list:
    cfg = metrics.CostConfig(p_tar)
    rows = []
    for system in table.roster:
        tar, non = table.split_scores(system)
        rows.append({"system": system, **metrics.summary(tar, non, cfg)})
    return rows


def cmd_eval(args) -> None:
    table = load_score_table(args.scores, args.key)
    if not table.labeled():
        raise DataError("every scored trial needs a key entry for evaluation")
    rows = _metrics_rows(table, args.p_tar)
    if args.json:
        sys.stdout.write(json.dumps({"p_tar": args.p_tar, "systems": rows}, indent=2, sort_keys=True) + "\n")
        return
    sys.stdout.write("system\tEER\tminC\tactC\tCllr\n")
    for r in rows:
        sys.stdout.write("\t".join([r["system"]] + [fmt_float(r[k]) for k in ("eer", "min_c", "act_c", "cllr")])
                         + "\n")


def cmd_det(args) -> None:
    table = load_score_table(args.scores, args.key)
    system = _pick_system(table, args.system)
    tar, non = table.split_scores(system)
    cfg = metrics.CostConfig(args.p_tar)
    lines = ["threshold,p_fn,p_fp,cost\n"]
    for p in metrics.det_points(tar, non):
        cost = metrics.detection_cost(p.p_fn, p.p_fp, cfg)
        lines.append(",".join(fmt_float(v) for v in (p.threshold, p.p_fn, p.p_fp, cost)) + "\n")
    atomic_write(args.out, "".join(lines))


def cmd_bench(args) -> None:
    from .bench import SPLITS, run_benchmark

    cfg = _load_config(args.config).with_(seed=args.seed)
    report = run_benchmark(cfg, threads=args.threads)
    atomic_write(args.report, report.to_tsv())
    if args.summary:
        atomic_write(args.summary, report.to_json())
    if args.scores_out:
        merged = ScoreTable([r for s in SPLITS for r in report.raw[s].records], report.raw["dev"].roster)
        atomic_write(args.scores_out, format_score_table(merged))
    sys.stdout.write(report.to_json() if args.json else report.to_tsv())


def build_parser() -> argparse.ArgumentParser:
    seed_help = f"random seed (default: ${SEED_ENV} or 0)"
    p = argparse.ArgumentParser(prog="fusebench",
                                description="Quality-aware score fusion for two-modality verification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "write a synthetic embedding/trial corpus")
    sp.add_argument("--config", help="TOML file of synthetic config keys (default: built-in)")
    sp.add_argument("--seed", type=int, default=None, help=seed_help)
    sp.add_argument("--out-dir", required=True, help="output directory")

    sp = add("train-quality", cmd_train_quality, "train the embedding quality network")
    sp.add_argument("--embeddings", required=True, help="embedding TSV with identity column")
    sp.add_argument("--out", required=True, help="parameter TSV to write")
    sp.add_argument("--epochs", type=int, default=30, help="default 30")
    sp.add_argument("--lr", type=float, default=0.05, help="SGD learning rate (default 0.05)")
    sp.add_argument("--tuple-size", type=int, default=3, help="embeddings per training tuple (default 3)")
    sp.add_argument("--scale", type=float, default=30.0, help="ArcFace scale (default 30)")
    sp.add_argument("--margin", type=float, default=0.2, help="ArcFace margin (default 0.2)")
    sp.add_argument("--hidden", type=int, default=None, help="hidden width (default max(16, d/2, classes))")
    sp.add_argument("--seed", type=int, default=None, help=seed_help)

    sp = add("predict-quality", cmd_predict_quality, "predict per-embedding qualities")
    sp.add_argument("--params", required=True)
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--out", required=True, help="TSV of id<TAB>quality")

    sp = add("score", cmd_score, "score trials by max-over-cluster cosine")
    sp.add_argument("--enroll", required=True, help="enrollment embeddings (recid/segid ids)")
    sp.add_argument("--test", required=True, help="test embeddings (recid/segid ids)")
    sp.add_argument("--trials", required=True, help="trial list or key TSV")
    sp.add_argument("--out", required=True, help="score TSV to write")
    sp.add_argument("--system", default="cos", help="system name in the output (default cos)")
    sp.add_argument("--k-max", type=int, default=3, help="partition union up to K clusters (default 3)")
    sp.add_argument("--ahc-threshold", type=float, default=None,
                    help="use a single threshold-mode partition instead (e.g. 0.5)")
    sp.add_argument("--use-quality", metavar="PARAMFILE", default=None,
                    help="quality net for weighted aggregation and quality columns")
    sp.add_argument("--cohort", default=None, help="cohort embeddings: as-norm each cluster score")
    sp.add_argument("--top-k", type=int, default=DEFAULT_TOP_K, help="as-norm top-K (default 200)")
    sp.add_argument("--threads", type=int, default=1, help="scoring threads (default 1)")

    sp = add("norm", cmd_norm, "as-norm a score file against a cohort")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--enroll", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--top-k", type=int, default=DEFAULT_TOP_K, help="default 200")
    sp.add_argument("--use-quality", metavar="PARAMFILE", default=None)

    sp = add("calibrate", cmd_calibrate, "train an affine Cllr calibrator for one system")
    sp.add_argument("--scores", required=True, help="training scores")
    sp.add_argument("--key", required=True, help="training key")
    sp.add_argument("--system", default=None, help="system to calibrate (default: the only one)")
    sp.add_argument("--p-tar", type=float, default=cal.DEFAULT_PRIOR, help="target prior (default 0.05)")
    sp.add_argument("--ridge", type=float, default=cal.DEFAULT_RIDGE, help="default 1e-6")
    sp.add_argument("--params-out", default=None, help="write calibration parameters")
    sp.add_argument("--apply", default=None, help="score file to calibrate (default: training scores)")
    sp.add_argument("--out", default=None, help="calibrated score TSV")

    sp = add("fuse", cmd_fuse, "fuse systems by Cllr logistic regression or the sum rule")
    sp.add_argument("--scores", required=True, help="training (or input) scores")
    sp.add_argument("--key", default=None, help="training key")
    sp.add_argument("--rule", choices=("lr", "sum"), default="lr", help="default lr")
    sp.add_argument("--use-q", default="", help="comma list of systems whose qualities enter, or 'all'")
    sp.add_argument("--p-tar", type=float, default=cal.DEFAULT_PRIOR, help="default 0.05")
    sp.add_argument("--ridge", type=float, default=cal.DEFAULT_RIDGE, help="default 1e-6")
    sp.add_argument("--params", default=None, help="apply these fusion parameters instead of training")
    sp.add_argument("--params-out", default=None)
    sp.add_argument("--apply", default=None, help="score file to fuse (default: --scores)")
    sp.add_argument("--name", default=cal.FUSED_SYSTEM, help="output system name (default fused)")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "print EER, minC, actC and Cllr per system")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--p-tar", type=float, default=metrics.DEFAULT_P_TAR, help="default 0.05")
    sp.add_argument("--json", action="store_true", help="JSON instead of TSV")

    sp = add("det", cmd_det, "write the DET sweep as CSV")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--system", default=None)
    sp.add_argument("--p-tar", type=float, default=metrics.DEFAULT_P_TAR, help="default 0.05")
    sp.add_argument("--out", required=True, help="CSV threshold,p_fn,p_fp,cost")

    sp = add("bench", cmd_bench, "run the synthetic fusion benchmark")
    sp.add_argument("--config", default=None, help="TOML config (default: built-in)")
    sp.add_argument("--seed", type=int, default=None, help=seed_help)
    sp.add_argument("--report", required=True, help="TSV report path")
    sp.add_argument("--summary", default=None, help="JSON summary path")
    sp.add_argument("--scores-out", default=None, help="write raw dev and eval trial scores (TSV)")
    sp.add_argument("--threads", type=int, default=1, help="default 1")
    sp.add_argument("--json", action="store_true", help="print the JSON summary instead of TSV")
    return p


def execute(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        if getattr(args, "threads", 1) < 1:
            raise DataError("--threads must be >= 1")
        args.func(args)
    except (DataError, OSError) as exc:
        sys.stderr.write(f"fusebench {args.command}: error: {exc}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(execute(sys.argv[1:]))


if __name__ == "__main__":
    main()
