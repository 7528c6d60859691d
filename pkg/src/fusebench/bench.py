"""End-to-end fusion benchmark on synthetic two-modality data.

Pipeline per modality: quality net training on held-aside identities, then
for every trial clustering of the test recording, quality-weighted cluster
aggregation, max-over-cluster cosine and as-norm scoring, and affine
calibration trained on the dev split.  Fusion variants are trained on dev
and reported on both dev and eval.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import calibration as cal
from . import metrics
from .clustering import aggregate_cluster, cosine, partition_union
from .core import DataError, Embedding, ScoreTable, SystemScore, TrialRecord, fmt_float
from .normalization import Cohort, as_norm
from .quality import TrainConfig, quality_batch, train_quality_net
from .synth import SynthConfig, gen_identities, gen_observations, identity_name, nuisance_direction

log = logging.getLogger(__name__)

MODALITY_TAG = {"speaker": "spk", "face": "face"}
VARIANTS = (
    "audio-only",
    "visual-only",
    "sum",
    "lr",
    "lr+q_spk",
    "lr+q_face",
    "lr+q_both",
    "lr+intra+inter",
)
SPLITS = ("dev", "eval")
METRIC_NAMES = ("eer", "min_c", "act_c")


@dataclass
class Trial:
    enroll: str  # identity name
    test_id: str
    members: tuple  # identity names present in the recording
    segments: dict  # modality -> list of Embedding
    label: str


@dataclass
class SplitData:
    name: str
    identities: list
    trials: list = field(default_factory=list)


def split_identities(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    """Disjoint identity pools: quality training, cohort, dev and eval."""
    order = [identity_name(int(i)) for i in rng.permutation(cfg.n_identities)]
    nq, nc = cfg.quality_identities, cfg.cohort_identities
    rest = order[nq + nc:]
    if len(rest) < 4:
        raise DataError("too few identities left for dev/eval splits")
    half = len(rest) // 2
    return {
        "quality": order[:nq],
        "cohort": order[nq:nq + nc],
        "dev": rest[:half],
        "eval": rest[half:],
    }


def enrollment_and_pool(cfg: SynthConfig, samples: list) -> tuple:
    """First ``enroll_size`` clean-tier samples enrol; the remainder feeds tests."""
    clean = [e for e in samples if e.true_noise == cfg.noise_low]
    if len(clean) < cfg.enroll_size:
        raise DataError(
            f"identity {samples[0].identity} has {len(clean)} clean samples, "
            f"needs {cfg.enroll_size} for enrollment"
        )
    enroll = clean[:cfg.enroll_size]
    taken = {e.id for e in enroll}
    pool = [e for e in samples if e.id not in taken]
    if len(pool) < cfg.segments_per_identity:
        raise DataError(f"identity {samples[0].identity} has too few test samples")
    return enroll, pool


def gen_trials(cfg: SynthConfig, split: str, identities: list, observations: dict,
               rng: np.random.Generator) -> list:
    """Trials pairing an enrolled identity with a synthetic multi-identity recording.

    ``observations`` maps modality -> identity -> list of Embedding.  Exactly
    ``round(target_fraction * trials)`` trials are targets.
    """
    if len(identities) < cfg.k_max + 1:
        raise DataError("split has too few identities for the recording size")
    n_tar = int(round(cfg.target_fraction * cfg.trials))
    is_target = np.zeros(cfg.trials, dtype=bool)
    is_target[:n_tar] = True
    rng.shuffle(is_target)
    pools = {
        m: {i: enrollment_and_pool(cfg, observations[m][i])[1] for i in identities}
        for m in observations
    }
    trials = []
    for t in range(cfg.trials):
        enrolled = identities[int(rng.integers(len(identities)))]
        others = [i for i in identities if i != enrolled]
        n_ids = int(rng.integers(1, cfg.k_max + 1))
        if is_target[t]:
            picks = rng.choice(len(others), size=n_ids - 1, replace=False)
            members = [enrolled] + [others[int(p)] for p in picks]
        else:
            picks = rng.choice(len(others), size=n_ids, replace=False)
            members = [others[int(p)] for p in picks]
        test_id = f"{split}{t:05d}"
        segments = {}
        for m in sorted(pools):
            segs = []
            for ident in members:
                pool = pools[m][ident]
                for idx in rng.choice(len(pool), size=cfg.segments_per_identity, replace=False):
                    src = pool[int(idx)]
                    segs.append(Embedding(f"{test_id}/{len(segs)}", m, src.values, ident, src.true_noise))
            segments[m] = segs
        label = "target" if is_target[t] else "nontarget"
        trials.append(Trial(enrolled, test_id, tuple(members), segments, label))
    return trials


class ModalityScorer:
    """Scores trials of one modality with a trained quality net and cohort."""

    def __init__(self, modality, qnet, cohort: Cohort, enrollments: dict, k_max: int):
        self.modality = modality
        self.qnet = qnet
        self.cohort = cohort
        self.k_max = k_max
        self.enroll = {}
        for ident, embs in enrollments.items():
            x = np.vstack([e.values for e in embs])
            q = quality_batch(qnet, x)
            agg = aggregate_cluster(x, range(len(embs)), q)
            self.enroll[ident] = (agg, float(np.mean(q)), cohort.stats(agg, ident))

    def score(self, trial: Trial) -> dict:
        agg_e, q_e, stats_e = self.enroll[trial.enroll]
        x = np.vstack([e.values for e in trial.segments[self.modality]])
        q = quality_batch(self.qnet, x)
        clusters = partition_union(x, min(self.k_max, x.shape[0])).clusters
        best = {"cos": (-np.inf, None), "asn": (-np.inf, None)}
        for c in clusters:
            agg = aggregate_cluster(x, c, q)
            s = cosine(agg_e, agg)
            a = as_norm(s, stats_e, self.cohort.stats(agg))
            if s > best["cos"][0]:
                best["cos"] = (s, c)
            if a > best["asn"][0]:
                best["asn"] = (a, c)
        tag = MODALITY_TAG[self.modality]
        return {
            f"{tag}_{kind}": SystemScore(float(s), q_e, float(np.mean(q[list(c)])))
            for kind, (s, c) in best.items()
        }


def score_trials(trials: list, scorers: list, threads: int = 1) -> ScoreTable:
    def one(trial):
        systems = {}
        for sc in scorers:
            systems.update(sc.score(trial))
        return TrialRecord(f"enr_{trial.enroll}", trial.test_id, trial.label, systems)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, trials))
    else:
        records = [one(t) for t in trials]
    roster = tuple(records[0].systems) if records else ()
    return ScoreTable(records, roster)


def _subtable(table: ScoreTable, systems) -> ScoreTable:
    recs = [TrialRecord(r.enroll_id, r.test_id, r.label, {s: r.systems[s] for s in systems})
            for r in table.records]
    return ScoreTable(recs, tuple(systems))


def _with_quality(fused: ScoreTable, source: ScoreTable, system: str, quality_from: str) -> ScoreTable:
    recs = []
    for f, r in zip(fused.records, source.records):
        q = r.systems[quality_from]
        recs.append(TrialRecord(f.enroll_id, f.test_id, f.label,
                                {system: SystemScore(f.systems[cal.FUSED_SYSTEM].score, q.q_enroll, q.q_test)}))
    return ScoreTable(recs, (system,))


def _merge(tables: list) -> ScoreTable:
    recs = []
    for parts in zip(*[t.records for t in tables]):
        systems = {}
        for p in parts:
            systems.update(p.systems)
        recs.append(TrialRecord(parts[0].enroll_id, parts[0].test_id, parts[0].label, systems))
    roster = tuple(s for t in tables for s in t.roster)
    return ScoreTable(recs, roster)


def calibrate_systems(dev: ScoreTable, tables: dict, prior: float) -> dict:
    """Per-system affine calibration trained on dev; qualities are carried over."""
    out = {}
    for split, table in tables.items():
        recs = [TrialRecord(r.enroll_id, r.test_id, r.label, {}) for r in table.records]
        out[split] = ScoreTable(recs, table.roster)
    for system in dev.roster:
        params = cal.calibrate(dev, system, prior)
        a, d = params.coef[system][0], params.offset
        for split, table in tables.items():
            for rec, src in zip(out[split].records, table.records):
                s = src.systems[system]
                rec.systems[system] = SystemScore(a * s.score + d, s.q_enroll, s.q_test)
    return out


def fusion_variants(dev: ScoreTable, ev: ScoreTable, prior: float) -> dict:
    """Return variant -> {split -> single-system ScoreTable of fused LLRs}."""
    tabs = {"dev": dev, "eval": ev}
    out = {}

    def single(system):
        return {k: _subtable(t, [system]) for k, t in tabs.items()}

    def lr(systems, use_q, source=None):
        source = source or tabs
        params, _ = cal.fuse_with_qualities(_subtable(source["dev"], systems), prior, use_q)
        return {k: cal.apply_fusion(params, _subtable(t, systems)) for k, t in source.items()}

    out["audio-only"] = single("spk_asn")
    out["visual-only"] = single("face_asn")
    out["sum"] = {k: cal.sum_fuse(_subtable(t, ["spk_asn", "face_asn"])) for k, t in tabs.items()}
    pair = ["spk_asn", "face_asn"]
    out["lr"] = lr(pair, {})
    out["lr+q_spk"] = lr(pair, {"spk_asn": True})
    out["lr+q_face"] = lr(pair, {"face_asn": True})
    out["lr+q_both"] = lr(pair, {"spk_asn": True, "face_asn": True})

    # quality-aware fusion inside each modality, then across modalities
    stage = {}
    for tag in ("spk", "face"):
        systems = [f"{tag}_cos", f"{tag}_asn"]
        fused = lr(systems, {f"{tag}_asn": True})
        stage[tag] = {k: _with_quality(fused[k], tabs[k], f"{tag}_intra", f"{tag}_asn") for k in tabs}
    inter_src = {k: _merge([stage["spk"][k], stage["face"][k]]) for k in tabs}
    out["lr+intra+inter"] = lr(["spk_intra", "face_intra"], {"spk_intra": True, "face_intra": True}, inter_src)
    return out


@dataclass
class BenchReport:
    config: SynthConfig
    rows: dict  # variant -> split -> metric -> value
    extras: dict
    raw: dict = field(default=None, repr=False, compare=False)  # split -> uncalibrated ScoreTable

    def to_tsv(self) -> str:
        header = ["variant"] + [f"{s}_{m}" for s in SPLITS for m in METRIC_NAMES]
        lines = ["\t".join(header)]
        for v in VARIANTS:
            vals = [fmt_float(self.rows[v][s][m]) for s in SPLITS for m in METRIC_NAMES]
            lines.append("\t".join([v] + vals))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"config": asdict(self.config), "rows": self.rows, "extras": self.extras},
            indent=2, sort_keys=True,
        ) + "\n"


def build_data(cfg: SynthConfig) -> dict:
    """Generate identities, observations and the identity split for a config."""
    rng = np.random.default_rng(cfg.seed)
    split = split_identities(cfg, rng)
    observations = {}
    for m in ("speaker", "face"):
        protos = gen_identities(cfg, m, rng)
        nuisance = nuisance_direction(cfg, m, rng)
        obs = gen_observations(cfg, protos, m, rng, nuisance=nuisance)
        by_id = {}
        for e in obs:
            by_id.setdefault(e.identity, []).append(e)
        observations[m] = by_id
    return {"rng": rng, "split": split, "observations": observations}


def run_benchmark(cfg: SynthConfig, threads: int = 1) -> BenchReport:
    data = build_data(cfg)
    rng, split, observations = data["rng"], data["split"], data["observations"]

    trials = {s: gen_trials(cfg, s, split[s], observations, rng) for s in SPLITS}

    scorers = []
    extras = {"quality_spearman": {}, "target_fraction": {}}
    for m in ("speaker", "face"):
        train = [e for i in split["quality"] for e in observations[m][i]]
        qnet = train_quality_net(train, TrainConfig(epochs=cfg.quality_epochs, seed=cfg.seed))
        held = [e for s in SPLITS for i in split[s] for e in observations[m][i]]
        q = quality_batch(qnet, np.vstack([e.values for e in held]))
        rho = spearmanr(q, [e.true_noise for e in held]).correlation
        extras["quality_spearman"][m] = float(rho)
        cohort = Cohort(np.vstack([e.values for i in split["cohort"] for e in observations[m][i]]), cfg.top_k)
        enrollments = {
            i: enrollment_and_pool(cfg, observations[m][i])[0] for s in SPLITS for i in split[s]
        }
        scorers.append(ModalityScorer(m, qnet, cohort, enrollments, cfg.k_max))

    raw = {s: score_trials(trials[s], scorers, threads) for s in SPLITS}
    for s in SPLITS:
        extras["target_fraction"][s] = float(np.mean(raw[s].labels()))
    calibrated = calibrate_systems(raw["dev"], raw, cfg.p_tar)
    variants = fusion_variants(calibrated["dev"], calibrated["eval"], cfg.p_tar)

    cost = metrics.CostConfig(cfg.p_tar)
    rows = {}
    for v in VARIANTS:
        rows[v] = {}
        for s in SPLITS:
            table = variants[v][s]
            tar, non = table.split_scores(table.roster[0])
            rows[v][s] = {
                "eer": metrics.eer(tar, non),
                "min_c": metrics.min_c(tar, non, cost),
                "act_c": metrics.act_c(tar, non, cost),
            }
    return BenchReport(cfg, rows, extras, raw)
