"""End-to-end desk-scale pipeline, in memory.

corpus -> resample -> normalization stats (training split) -> extractor
training with per-example obfuscation -> per-block features for every
session -> PCA + UBM -> t-models / z-sequences from training users ->
enrollment and windowed scoring of validation and test clients -> metrics.

The same back-end also runs on block-averaged 14-d features, the "raw"
baseline the learned features are compared against.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import backend as bk
from .config import ExperimentConfig
from .errors import InsufficientDataError
from .evaluation import compute_eer, hter, per_group_eer
from .models import ModelGraph, forward_batch, init_model, strip_head
from .signal import (NormalizationStats, apply_affine, assemble_blocks, draw_obfuscation,
                     extract_features, fit_normalization, required_frames, resample)
from .synth import CorpusManifest, build_corpus, stream_rng
from .training import TrainResult, train_extractor

log = logging.getLogger(__name__)


@dataclass
class PreparedCorpus:
    """Resampled sensor values per session plus training-split statistics."""
    manifest: CorpusManifest
    values: dict
    stats: NormalizationStats
    channel_std: np.ndarray

    def entries(self, split):
        return self.manifest.split(split)


def prepare_corpus(manifest: CorpusManifest, cfg: ExperimentConfig) -> PreparedCorpus:
    values = {}
    for e in manifest.entries:
        stream = manifest.load(e)
        if stream.rate_hz != cfg.pipeline.rate_hz:
            stream = resample(stream, cfg.pipeline.rate_hz)
        values[e.session_id] = stream.values
    train = [values[e.session_id] for e in manifest.split("train")]
    if not train:
        raise InsufficientDataError("the corpus has no training sessions")
    stats = fit_normalization(train)
    channel_std = np.concatenate(train).std(axis=0)
    return PreparedCorpus(manifest, values, stats, channel_std)


def session_blocks(values, stats, cfg: ExperimentConfig):
    p = cfg.pipeline
    return assemble_blocks(extract_features(values, stats), p.block_len, None, p.overlap).blocks


def make_prepare(prepared: PreparedCorpus, cfg: ExperimentConfig, obfuscate: bool,
                 seed=None) -> Callable:
    """Per-visit example builder: random crop, optional obfuscation, blocks.

    Crop offsets come from the rng handed in by the trainer; obfuscation
    vectors from their own named sub-stream, so switching obfuscation on or
    off leaves the crops seen during training unchanged.
    """
    p = cfg.pipeline
    need = required_frames(p.block_len, p.n_blocks, p.overlap)
    obf_rng = stream_rng(cfg.seed if seed is None else seed, "obfuscation")

    def prepare(values, rng):
        if len(values) < need:
            raise InsufficientDataError(f"training session has {len(values)} frames, "
                                        f"a sequence needs {need}")
        start = int(rng.integers(0, len(values) - need + 1))
        crop = values[start:start + need]
        if obfuscate:
            vec = draw_obfuscation(obf_rng, prepared.channel_std)
            crop = apply_affine(crop, vec.gains, vec.offsets)
        feats = extract_features(crop, prepared.stats)
        return assemble_blocks(feats, p.block_len, p.n_blocks, p.overlap).blocks

    return prepare


def train_model(prepared: PreparedCorpus, cfg: ExperimentConfig, obfuscate=None,
                seed=None) -> tuple:
    """Train the configured extractor on the training split.

    Returns ``(TrainResult, user_ids)``; labels are indices into ``user_ids``.
    """
    seed = cfg.seed if seed is None else seed
    entries = prepared.entries("train")
    users = prepared.manifest.users("train")
    index = {u: i for i, u in enumerate(users)}
    examples, labels = [], []
    for e in entries:
        for _ in range(cfg.train.crops_per_session):
            examples.append(prepared.values[e.session_id])
            labels.append(index[e.user_id])
    model = init_model(cfg.model.model_config(n_classes=len(users)), seed)
    tcfg = cfg.train.train_config(seed)
    obf = tcfg.obfuscate if obfuscate is None else obfuscate
    result = train_extractor(examples, labels, model, tcfg, make_prepare(prepared, cfg, obf, seed))
    return result, users


def extract_features_for(model: ModelGraph, blocks: np.ndarray, chunk: int) -> np.ndarray:
    """Penultimate features for every block of a session.

    The session is cut into consecutive sequences of ``chunk`` blocks (the
    training sequence length); the last, shorter remainder is its own sequence.
    """
    nb = len(blocks)
    full = nb // chunk
    parts = []
    if full:
        _, feats, _ = forward_batch(model, blocks[:full * chunk].reshape(full, chunk, *blocks.shape[1:]))
        parts.append(feats.reshape(full * chunk, -1))
    if nb > full * chunk:
        _, feats, _ = forward_batch(model, blocks[None, full * chunk:])
        parts.append(feats[0])
    return np.concatenate(parts)


def learned_features(model, prepared: PreparedCorpus, cfg: ExperimentConfig) -> dict:
    model = strip_head(model)
    return {sid: extract_features_for(model, session_blocks(v, prepared.stats, cfg),
                                      cfg.pipeline.n_blocks)
            for sid, v in prepared.values.items()}


def raw_block_features(prepared: PreparedCorpus, cfg: ExperimentConfig) -> dict:
    """Baseline: the 14-d normalized frames averaged over each block."""
    return {sid: session_blocks(v, prepared.stats, cfg).mean(axis=1)
            for sid, v in prepared.values.items()}


# -- back-end ----------------------------------------------------------------------

@dataclass
class SplitScores:
    records: list
    genuine_raw: np.ndarray
    impostor_raw: np.ndarray
    genuine_zt: np.ndarray
    impostor_zt: np.ndarray


@dataclass
class BackendResult:
    ubm: bk.GmmParams
    pca: bk.PcaModel
    zt: bk.ZtNormParams
    clients: dict
    scores: dict
    metrics: dict
    heldout_z: dict = field(default_factory=dict)


def enroll_split(split, manifest: CorpusManifest, proj: dict, ubm, zt, cfg: ExperimentConfig):
    """MAP-adapt one client per user of ``split`` on its enrollment sessions and
    store the client's z statistics in ``zt``."""
    b = cfg.backend
    enroll_ids = {}
    for e in manifest.split(split):
        if e.session_index < b.n_enroll:
            enroll_ids.setdefault(e.user_id, []).append(e.session_id)
    clients = {}
    for user in manifest.users(split):
        if user not in enroll_ids:
            log.warning("client %s has no enrollment sessions; skipped", user)
            continue
        Y = np.concatenate([proj[s] for s in enroll_ids[user]])
        cm = bk.map_adapt(ubm, Y, b.relevance, b.map_iters, client_id=user)
        zt.enroll(cm)
        clients[user] = cm
    return clients


def score_split(split, manifest: CorpusManifest, proj: dict, ubm, zt, clients: dict,
                cfg: ExperimentConfig, window_s=None) -> SplitScores:
    """Score every window of every non-enrollment session of ``split`` against
    every client of that split; the t-norm cohort is computed once per window."""
    b = cfg.backend
    window_s = b.window_s if window_s is None else window_s
    users = set(manifest.users(split))
    split_clients = {cid: cm for cid, cm in clients.items() if cid in users}
    records = []
    for e in manifest.split(split):
        if e.session_index < b.n_enroll:
            continue
        for w, Y in enumerate(bk.session_windows(proj[e.session_id], window_s,
                                                 cfg.feature_rate_hz)):
            ubm_ll = bk._logsumexp(bk._log_components(Y, ubm))
            cohort = np.array([bk.log_ratios(Y, tm, ubm, ubm_ll).mean() for tm in zt.t_models])
            cz = (cohort - zt.t_zstats[:, 0]) / zt.t_zstats[:, 1]
            mu_t, sd_t = cz.mean(), max(cz.std(), bk.ZSTAT_FLOOR)
            for cid, cm in split_clients.items():
                raw = float(bk.log_ratios(Y, cm, ubm, ubm_ll).mean())
                mu_c, sd_c = zt.client_zstats[cid]
                z = (raw - mu_c) / sd_c
                records.append(bk.ScoreRecord(raw, e.session_id, cid == e.user_id, float(z),
                                              float((z - mu_t) / sd_t), cid, w))
    return split_scores(records)


def split_scores(records) -> SplitScores:
    gen = np.array([r.genuine for r in records], dtype=bool)
    raw = np.array([r.raw for r in records])
    ztv = np.array([r.zt for r in records])
    return SplitScores(records, raw[gen], raw[~gen], ztv[gen], ztv[~gen])


def split_metrics(val: SplitScores, test: SplitScores) -> dict:
    """EER on both splits, and test HTER at the validation EER threshold."""
    metrics = {}
    for kind in ("raw", "zt"):
        g_v, i_v = getattr(val, f"genuine_{kind}"), getattr(val, f"impostor_{kind}")
        g_t, i_t = getattr(test, f"genuine_{kind}"), getattr(test, f"impostor_{kind}")
        val_eer, theta = compute_eer(g_v, i_v)
        metrics[f"{kind}.val_eer"] = float(val_eer)
        metrics[f"{kind}.val_theta"] = theta
        metrics[f"{kind}.test_eer"] = float(compute_eer(g_t, i_t)[0])
        metrics[f"{kind}.test_hter"] = hter(g_t, i_t, theta)
    metrics["raw.test_per_client_eer"] = per_group_eer(test.records)[0]
    return metrics


def fit_backend_models(features: dict, manifest: CorpusManifest, cfg: ExperimentConfig,
                       seed=None):
    """PCA, UBM and zt-norm cohorts from the training split.

    t-models come from each training user's first session. The windows of the
    remaining training sessions form an impostor pool that is shuffled and
    split: ``z_fraction`` of it become z-sequences, the rest is returned as a
    held-out impostor set for checking the z statistics.
    Returns ``(pca, proj, ubm, zt, heldout)``.
    """
    b = cfg.backend
    seed = cfg.seed if seed is None else seed
    train = manifest.split("train")
    X = np.concatenate([features[e.session_id] for e in train])
    pca = bk.fit_pca(X, min(b.pca_dim, X.shape[1]))
    proj = {sid: pca.project(Y) for sid, Y in features.items()}
    ubm = bk.fit_ubm(np.concatenate([proj[e.session_id] for e in train]), b.components,
                     b.kmeans_iters, b.em_iters, seed)
    t_subsets, pool = [], []
    for e in train:
        if e.session_index == 0:
            t_subsets.append(proj[e.session_id])
        else:
            pool.extend(bk.session_windows(proj[e.session_id], b.window_s, cfg.feature_rate_hz))
    order = stream_rng(seed, "z-split").permutation(len(pool))
    n_z = max(1, int(round(b.z_fraction * len(pool))))
    z_seqs = [pool[i] for i in order[:n_z]]
    held = [pool[i] for i in order[n_z:]]
    zt = bk.fit_ztnorm(ubm, t_subsets, z_seqs, b.relevance, b.map_iters)
    return pca, proj, ubm, zt, held


def run_backend(features: dict, prepared: PreparedCorpus, cfg: ExperimentConfig,
                seed=None) -> BackendResult:
    manifest = prepared.manifest
    pca, proj, ubm, zt, held = fit_backend_models(features, manifest, cfg, seed)
    clients, scores = {}, {}
    for split in ("val", "test"):
        clients.update(enroll_split(split, manifest, proj, ubm, zt, cfg))
        scores[split] = score_split(split, manifest, proj, ubm, zt, clients, cfg)
    metrics = split_metrics(scores["val"], scores["test"])
    heldout = {}
    if held:
        for cid, cm in clients.items():
            mu_c, sd_c = zt.client_zstats[cid]
            s = np.array([bk.log_ratios(Y, cm, ubm).mean() for Y in held])
            zs = (s - mu_c) / sd_c
            heldout[cid] = (float(zs.mean()), float(zs.std()))
    return BackendResult(ubm, pca, zt, clients, scores, metrics, heldout)


@dataclass
class ExperimentResult:
    learned: BackendResult
    raw: Optional[BackendResult]
    train: Optional[TrainResult]
    seconds: float

    def summary(self):
        out = {f"learned.{k}": v for k, v in self.learned.metrics.items()}
        if self.raw is not None:
            out.update({f"rawfeat.{k}": v for k, v in self.raw.metrics.items()})
        out["seconds"] = self.seconds
        return out


def run_experiment(cfg: ExperimentConfig, manifest: Optional[CorpusManifest] = None,
                   baseline=True, obfuscate=None, prepared=None) -> ExperimentResult:
    """Whole pipeline on an in-memory corpus built from ``cfg`` (or ``manifest``)."""
    start = time.perf_counter()
    if prepared is None:
        if manifest is None:
            c = cfg.corpus
            manifest = build_corpus(c.n_train_users, c.n_val_users, c.n_test_users,
                                    c.sessions_per_user, cfg.seed, None, c.duration_s,
                                    c.recalibrated, cfg.backend.n_enroll)
        prepared = prepare_corpus(manifest, cfg)
    result, _ = train_model(prepared, cfg, obfuscate)
    learned = run_backend(learned_features(result.model, prepared, cfg), prepared, cfg)
    raw = run_backend(raw_block_features(prepared, cfg), prepared, cfg) if baseline else None
    return ExperimentResult(learned, raw, result, time.perf_counter() - start)
