"""Experiment steps behind the CLI subcommands.

Every step reads its inputs from the run directory, writes its outputs back
there and returns the artifact paths it wrote (relative to the run dir).
Repetition ``r`` initialises weights from ``repeat_seed(seed, r)``; repetition 0
uses the split stored with the corpus, later ones re-split with that seed.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.model_selection import StratifiedKFold

from . import aggregate as agg
from . import calibration as cal
from . import explain as xai
from . import inference as inf
from . import stats
from .config import ArchitectureConfig, RunConfig
from .errors import CapabilityError, MissingArtifactError
from .models import build, load_model, prepare, save_model
from .nn import Network
from .preprocess import load_frames, normalize, process_frames, write_features
from .reports import TABLE1_COLUMNS, TABLE2_COLUMNS, CalibrationSummary, MetricsReport, metrics
from .runs import RunDir, repeat_seed
from .synthdata import (OOD_KINDS, Corpus, flip_labels, generate_corpus, generate_frames, generate_ood,
                        load_corpus, mnist_patches, split_labels, write_corpus)
from .tensor_io import load_tensor, read_idx_images, read_json, save_tensor, write_csv, write_json
from .training import fit

logger = logging.getLogger("qpi-explain")

GUIDED_METHOD = "guided_grad_cam"


@dataclass
class Split:
    x: np.ndarray  # normalised patches [N, 50, 50]
    y: np.ndarray
    ids: np.ndarray


class Experiment:
    """One run directory plus the cached corpus."""

    def __init__(self, run: RunDir):
        self.run = run
        self.config: RunConfig = run.config
        self._corpus: Optional[Corpus] = None

    def rel(self, path: Path) -> str:
        return str(Path(path).relative_to(self.run.path))

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            directory = Path(self.config.corpus_dir) if self.config.corpus_dir else self.run.corpus
            self._corpus = load_corpus(directory)
        return self._corpus

    def splits(self, repeat: int) -> Dict[str, Split]:
        c = self.corpus
        x = normalize(c.patches, self.config.preprocess.clip_low, self.config.preprocess.clip_high)
        # repetition 0 keeps the split recorded in the corpus manifest
        assignment = c.split if repeat == 0 else split_labels(c.labels, repeat_seed(self.config.seed, repeat))
        return {name: Split(x[assignment == name], c.labels[assignment == name], c.ids[assignment == name])
                for name in ("train", "val", "test")}

    def model(self, arch: ArchitectureConfig, repeat: int = 0) -> Network:
        return load_model(self.run.model_path(arch.name, repeat), producer="train")


# ============================================================================
# STEPS
# ============================================================================

def step_synth(exp: Experiment) -> List[str]:
    cfg = exp.config
    corpus = generate_corpus(n_per_class=cfg.synth.n_per_class, seed=cfg.seed, gate=cfg.preprocess)
    write_corpus(exp.run.corpus, corpus)
    exp._corpus = corpus
    written = [exp.rel(exp.run.corpus / "patches.qpit"), exp.rel(exp.run.corpus / "manifest.csv")]
    digits = mnist_patches(read_idx_images(cfg.mnist_idx)) if cfg.mnist_idx else None
    for kind in OOD_KINDS:
        path = exp.run.sub("ood_sets", f"{kind}.qpit")
        save_tensor(path, generate_ood(kind, cfg.synth.ood_per_kind, cfg.seed, digits=digits))
        written.append(exp.rel(path))
    shifted = generate_corpus(n_per_class=max(1, cfg.synth.ood_per_kind // 4), seed=cfg.seed + 1, donor_shift=0.1,
                              gate=cfg.preprocess)
    path = exp.run.sub("ood_sets", "donor_shift.qpit")
    save_tensor(path, shifted.patches)
    written.append(exp.rel(path))
    if cfg.synth.n_frames:
        frames = generate_frames(n_frames=cfg.synth.n_frames, cells_per_frame=cfg.synth.cells_per_frame, seed=cfg.seed)
        entries = []
        for f in frames.frames:
            name = f"frame{f.frame_id:03d}.qpit"
            save_tensor(exp.run.sub("frames", name), f.phase)
            entries.append({"id": f.frame_id, "path": name})
        write_json(exp.run.sub("frames", "manifest.json"), {"frames": entries})
        write_csv(exp.run.sub("frames", "truth.csv"), ["frame", "x", "y", "class"],
                  [[i, x, y, k] for i, t in enumerate(frames.truths) for x, y, k in t])
        written.append(exp.rel(exp.run.path / "frames" / "manifest.json"))
    return written


def step_preprocess(exp: Experiment) -> List[str]:
    cfg = exp.config
    manifest = Path(cfg.frames_manifest) if cfg.frames_manifest else exp.run.path / "frames" / "manifest.json"
    if not manifest.exists():
        raise MissingArtifactError(str(manifest), "synth")
    result = process_frames(load_frames(manifest), cfg.preprocess)
    patches = np.stack([p.data for p in result.patches]) if result.patches else np.zeros((0, 50, 50))
    save_tensor(exp.run.sub("preprocess", "patches.qpit"), patches)
    write_features(exp.run.sub("preprocess", "features.csv"), result.rows)
    write_csv(exp.run.sub("preprocess", "patches.csv"), ["index", "frame", "contour", "cx", "cy"],
              [[i, p.frame_id, p.contour_id, p.centroid[0], p.centroid[1]] for i, p in enumerate(result.patches)])
    return ["preprocess/patches.qpit", "preprocess/features.csv", "preprocess/patches.csv"]


def _train(exp: Experiment, arch: ArchitectureConfig, x: np.ndarray, y: np.ndarray, seed: int):
    net = build(arch, seed=seed)
    history = fit(net, prepare(net, x), y, exp.config.train, seed=seed)
    return net, history


def train_one(exp: Experiment, arch: ArchitectureConfig, repeat: int = 0,
              labels: Optional[np.ndarray] = None) -> Tuple[Network, list]:
    s = exp.splits(repeat)["train"]
    return _train(exp, arch, s.x, s.y if labels is None else labels, repeat_seed(exp.config.seed, repeat))


def step_train(exp: Experiment, repeat: int = 0) -> List[str]:
    written = []
    for arch in exp.config.architectures:
        net, history = train_one(exp, arch, repeat)
        path = exp.run.model_path(arch.name, repeat)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(path, net)
        write_json(exp.run.sub("models", f"{arch.name}-r{repeat}.history.json"), [h.to_dict() for h in history])
        written.append(exp.rel(path))
    return written


def _predict_split(exp: Experiment, net: Network, split: Split, repeat: int):
    x = prepare(net, split.x)
    freq = inf.predict_frequentist(net, x, split.ids, split.y)
    summary, _ = inf.predict_variational(net, x, exp.config.passes, repeat_seed(exp.config.seed, repeat),
                                         split.ids, split.y, exp.config.vi_metric)
    return freq, summary


def step_evaluate(exp: Experiment, repeat: int = 0) -> Tuple[List[str], Dict[str, Dict[str, object]]]:
    """Frequentist and variational test predictions plus metrics per architecture."""
    written: List[str] = []
    results: Dict[str, Dict[str, object]] = {}
    test = exp.splits(repeat)["test"]
    for arch in exp.config.architectures:
        net = exp.model(arch, repeat)
        freq, summary = _predict_split(exp, net, test, repeat)
        base = f"predictions/{arch.name}-r{repeat}"
        inf.write_records(exp.run.sub(f"{base}-softmax_max.csv"), freq)
        for source in ("vi_mean", "vi_median", "vi_std"):
            inf.write_records(exp.run.sub(f"{base}-{source}.csv"), summary.records(source))
        save_tensor(exp.run.sub(f"{base}-logits.qpit"), np.stack([r.logits for r in freq]))
        vi_records = summary.records("vi_" + exp.config.vi_metric)
        entry = {"frequentist": metrics(freq, arch.n_classes), "variational": metrics(vi_records, arch.n_classes)}
        write_json(exp.run.sub(f"reports/metrics-{arch.name}-r{repeat}.json"),
                   {"averaging": "macro", **{k: v.to_dict() for k, v in entry.items()}})
        written += [f"{base}-{s}.csv" for s in ("softmax_max", "vi_mean", "vi_median", "vi_std")]
        written += [f"{base}-logits.qpit", f"reports/metrics-{arch.name}-r{repeat}.json"]
        results[arch.name] = entry
    return written, results


def step_calibrate(exp: Experiment, repeat: int = 0) -> Tuple[List[str], Dict[str, Dict[str, cal.CalibrationReport]]]:
    """Temperature scaling and the vi_std map, fitted on val and judged on test."""
    written: List[str] = []
    results: Dict[str, Dict[str, cal.CalibrationReport]] = {}
    splits = exp.splits(repeat)
    run_id = f"{exp.run.run_id}/r{repeat}"
    for arch in exp.config.architectures:
        net = exp.model(arch, repeat)
        val_logits = inf.eval_logits(net, prepare(net, splits["val"].x))
        test_logits = inf.eval_logits(net, prepare(net, splits["test"].x))
        t_report = cal.temperature_report(val_logits, splits["val"].y, test_logits, splits["test"].y,
                                          exp.config.bins, run_id)
        _, val_summary = _predict_split(exp, net, splits["val"], repeat)
        _, test_summary = _predict_split(exp, net, splits["test"], repeat)
        v_report = cal.vi_std_report(val_summary, test_summary, exp.config.bins, run_id)
        results[arch.name] = {"softmax_max": t_report, "vi_std": v_report}
        for source, report in results[arch.name].items():
            path = exp.run.sub("calibration", f"{arch.name}-r{repeat}-{source}.json")
            write_json(path, report.to_dict())
            written.append(exp.rel(path))
    return written, results


def _explain_inputs(exp: Experiment, arch: ArchitectureConfig, repeat: int = 0):
    test = exp.splits(repeat)["test"]
    n = min(exp.config.explain.n_samples, len(test.y))
    net = exp.model(arch, repeat)
    x = test.x[:n]
    records = inf.predict_frequentist(net, prepare(net, x), test.ids[:n], test.y[:n])
    return net, x, records


def step_explain(exp: Experiment, repeat: int = 0) -> List[str]:
    """LIME and guided Grad-CAM maps for test samples, plus one example of every method."""
    written = []
    cfg = exp.config
    for arch in cfg.architectures:
        net, x, records = _explain_inputs(exp, arch, repeat)
        base = exp.run.sub("explanations", arch.name, "records.csv")
        inf.write_records(base, records)
        targets = [r.predicted for r in records]
        ids = [r.sample_id for r in records]
        methods = ["lime"]
        try:
            xai.cam_layer(net)
            methods.append(GUIDED_METHOD)
        except CapabilityError as e:
            logger.info(f"{arch.name}: skipping guided Grad-CAM ({e.message})")
        for method in methods:
            maps = xai.explain_batch(net, x, targets, method, ids, cfg.seed, cfg.lime, cfg.explain)
            for m in maps:
                m.save(exp.run.sub("explanations", arch.name, method, f"{m.sample_id}.qpit"))
            written.append(f"explanations/{arch.name}/{method}")
        for method in xai.METHODS:
            try:
                m = xai.explain_one(net, x[0], targets[0], method, ids[0], cfg.seed, cfg.lime, cfg.explain)
            except CapabilityError:
                continue
            xai.write_map_csv(exp.run.sub("explanations", arch.name, "examples", f"{method}.csv"), m)
        written.append(f"explanations/{arch.name}/examples")
    return written


def _load_maps(exp: Experiment, arch: str, method: str, records) -> List[xai.ExplanationMap]:
    return [xai.ExplanationMap.load(exp.run.path / "explanations" / arch / method / f"{r.sample_id}.qpit")
            for r in records]


def step_aggregate(exp: Experiment) -> List[str]:
    """Confidence grids, t-SNE embedding and k-means composition of the LIME maps."""
    written = []
    cfg = exp.config
    names = list(exp.corpus.class_names)
    for arch in cfg.architectures:
        records = inf.read_records(exp.run.path / "explanations" / arch.name / "records.csv", producer="explain")
        for method in ("lime", GUIDED_METHOD):
            if not (exp.run.path / "explanations" / arch.name / method).exists():
                continue
            maps = _load_maps(exp, arch.name, method, records)
            grid = agg.aggregate_by_confidence(maps, records, cfg.explain.meta_bins, arch.n_classes)
            agg.save_grid(exp.run.sub("aggregate", arch.name, method, "index.json").parent, grid, names)
            written.append(f"aggregate/{arch.name}/{method}")
        maps = _load_maps(exp, arch.name, "lime", records)
        flat = np.stack([m.values.ravel() for m in maps])
        emb = agg.tsne(flat, cfg.explain.perplexity, cfg.explain.tsne_iters, cfg.seed)
        clusters = agg.kmeans(emb.coords, arch.n_classes, cfg.seed)
        classes = [r.label for r in records]
        agg.write_embedding(exp.run.sub("aggregate", arch.name, "embedding.csv"),
                            [r.sample_id for r in records], emb, clusters.labels, classes)
        table = agg.cluster_composition(clusters.labels, classes, arch.n_classes)
        agg.write_composition(exp.run.sub("aggregate", arch.name, "clusters.csv"), table, names)
        write_json(exp.run.sub("aggregate", arch.name, "tsne.json"),
                   {"perplexity": emb.perplexity, "kl": emb.kl, "kl_trace": emb.kl_trace,
                    "kmeans_inertia": clusters.inertia, "kmeans_iterations": clusters.iterations})
        written += [f"aggregate/{arch.name}/embedding.csv", f"aggregate/{arch.name}/clusters.csv"]
    return written


def _temperature(exp: Experiment, arch: ArchitectureConfig, net: Network, repeat: int = 0) -> float:
    path = exp.run.path / "calibration" / f"{arch.name}-r{repeat}-softmax_max.json"
    if path.exists():
        return float(read_json(path)["temperature"])
    val = exp.splits(repeat)["val"]
    return cal.fit_temperature(inf.eval_logits(net, prepare(net, val.x)), val.y)


def _vi_std_map(exp: Experiment, arch: ArchitectureConfig, net: Network, repeat: int = 0) -> cal.ConfidenceMap:
    path = exp.run.path / "calibration" / f"{arch.name}-r{repeat}-vi_std.json"
    if path.exists():
        m = read_json(path).get("confidence_map") or {}
        return cal.ConfidenceMap(a=float(m.get("a", 1.0)), b=float(m.get("b", 0.0)))
    _, val_summary = _predict_split(exp, net, exp.splits(repeat)["val"], repeat)
    return cal.calibrate_vi_std(val_summary, n_bins=exp.config.bins)


def step_ood(exp: Experiment, repeat: int = 0) -> List[str]:
    """Calibrated confidence on leukocytes vs. every OOD set; Kruskal-Wallis + Bonferroni.

    ``ood_source`` picks the confidence: ``vi_std`` (default) maps the
    dropout spread through the fitted vi_std map, ``softmax_max`` uses
    temperature-scaled softmax.
    """
    cfg = exp.config
    arch = cfg.architectures[0]
    net = exp.model(arch, repeat)
    test = exp.splits(repeat)["test"]
    groups: Dict[str, np.ndarray] = {}
    if cfg.ood_source == "vi_std":
        cmap = _vi_std_map(exp, arch, net, repeat)
        calibration = {"confidence_map": {"a": cmap.a, "b": cmap.b}}

        def confidences(patches: np.ndarray) -> np.ndarray:
            summary, _ = inf.predict_variational(net, prepare(net, patches), cfg.passes,
                                                 repeat_seed(cfg.seed, repeat), metric=cfg.vi_metric)
            return cmap.apply([r.confidence for r in summary.records("vi_std")])
    else:
        t = _temperature(exp, arch, net, repeat)
        calibration = {"temperature": t}

        def confidences(patches: np.ndarray) -> np.ndarray:
            logits = inf.eval_logits(net, prepare(net, patches))
            return cal.temperature_softmax(logits, t).max(axis=1)

    groups["leukocytes"] = confidences(test.x)
    for kind in OOD_KINDS + ("donor_shift",):
        path = exp.run.path / "ood_sets" / f"{kind}.qpit"
        if not path.exists():
            raise MissingArtifactError(str(path), "synth")
        raw = load_tensor(path)
        groups[kind] = confidences(normalize(raw, cfg.preprocess.clip_low, cfg.preprocess.clip_high))
    result = stats.bonferroni_posthoc(groups, cfg.alpha)
    stats.write_posthoc(exp.run.sub("ood", "posthoc.csv"), result)
    stats.write_summary(exp.run.sub("ood", "confidence.csv"), stats.confidence_summary(groups))
    write_json(exp.run.sub("ood", "kruskal.json"),
               {"model": arch.name, "source": cfg.ood_source, **calibration, "error_bars": "se",
                **result.omnibus.to_dict()})
    return ["ood/posthoc.csv", "ood/confidence.csv", "ood/kruskal.json"]


def step_mislabels(exp: Experiment, repeat: int = 0) -> List[str]:
    """Plant label flips in the training split and screen for confident disagreements.

    Cross-fitted: the split is cut into ``mislabel_folds`` stratified folds and
    every fold is scored by a model trained on the others, so no sample is
    judged by a network that saw its (possibly flipped) label.
    """
    cfg = exp.config
    arch = cfg.architectures[0]
    train = exp.splits(repeat)["train"]
    seed = repeat_seed(cfg.seed, repeat)
    noisy, flipped = flip_labels(train.y, cfg.synth.label_noise, seed, arch.n_classes)
    folds = StratifiedKFold(n_splits=cfg.mislabel_folds, shuffle=True, random_state=seed % 2 ** 32)
    records: List[inf.PredictionRecord] = []
    for k, (fit_idx, held_idx) in enumerate(folds.split(train.x, noisy)):
        net, _ = _train(exp, arch, train.x[fit_idx], noisy[fit_idx], seed)
        records += inf.predict_frequentist(net, prepare(net, train.x[held_idx]), train.ids[held_idx], noisy[held_idx])
        logger.debug(f"mislabels: fold {k + 1}/{cfg.mislabel_folds} scored {len(held_idx)} samples")
    suspects = stats.find_mislabeled(records, cfg.mislabel_threshold)
    planted = {int(train.ids[i]) for i in flipped}
    found = {r.sample_id for r in suspects}
    recall = len(planted & found) / len(planted) if planted else 1.0
    inf.write_records(exp.run.sub("mislabels", "suspects.csv"), suspects)
    write_json(exp.run.sub("mislabels", "summary.json"), {
        "model": arch.name,
        "threshold": cfg.mislabel_threshold,
        "folds": cfg.mislabel_folds,
        "planted": sorted(planted),
        "suspects": [r.sample_id for r in suspects],
        "recall": recall,
        "precision": len(planted & found) / len(found) if found else 0.0,
    })
    logger.info(f"mislabels: {len(suspects)} suspects, recall of planted flips {recall:.2f}")
    return ["mislabels/suspects.csv", "mislabels/summary.json"]


def step_repro(exp: Experiment) -> List[str]:
    """Full sequence: synth, repeat x (train, evaluate, calibrate), explain, aggregate, ood, mislabels."""
    cfg = exp.config
    written = step_synth(exp)
    table1: Dict[Tuple[str, str], MetricsReport] = {}
    table2: Dict[Tuple[str, str], CalibrationSummary] = {}
    bins: Dict[Tuple[str, str], List[cal.ReliabilityBins]] = {}
    for r in range(cfg.repeat):
        logger.info(f"repro: repetition {r + 1}/{cfg.repeat}")
        written += step_train(exp, r)
        w, evaluated = step_evaluate(exp, r)
        written += w
        w, calibrated = step_calibrate(exp, r)
        written += w
        for arch in cfg.architectures:
            for mode, entry in evaluated[arch.name].items():
                table1.setdefault((arch.name, mode), MetricsReport(arch.name, mode, arch.dropout)).add(entry)
            for source, report in calibrated[arch.name].items():
                table2.setdefault((arch.name, source), CalibrationSummary(arch.name, source)).add(report)
                bins.setdefault((arch.name, source), []).append(report.bins)
    write_csv(exp.run.sub("reports", "table1.csv"), TABLE1_COLUMNS, [m.row() for m in table1.values()])
    write_csv(exp.run.sub("reports", "table2.csv"), TABLE2_COLUMNS, [c.row() for c in table2.values()])
    written += ["reports/table1.csv", "reports/table2.csv"]
    for (arch, source), runs in bins.items():
        path = exp.run.sub("reports", f"reliability-{arch}-{source}.csv")
        cal.write_reliability(path, cal.reliability_export(runs))
        written.append(exp.rel(path))
    write_json(exp.run.sub("reports", "table1.json"), [m.to_dict() for m in table1.values()])
    written += step_explain(exp)
    written += step_aggregate(exp)
    written += step_ood(exp)
    written += step_mislabels(exp)
    return written
