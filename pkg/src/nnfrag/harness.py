"""Experiment orchestration: datasets, model presets, attack campaigns and
their CSV/PGM artifacts.

Campaign CSVs are deterministic for a given spec: rows are ordered by
(image_id, attack, epsilon, method), numbers use 9 significant digits and
wall-clock times only go to ``manifest.json``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, attacks, data, engine, influence, interpret, metrics

log = logging.getLogger(__name__)

ROW_FIELDS = ["image_id", "method", "attack", "epsilon", "rank_corr", "top_k", "k", "center_shift",
              "pred_preserved"]
SUMMARY_FIELDS = ["method", "attack", "epsilon", "n", "excluded", "rank_corr_mean", "rank_corr_std",
                  "top_k_mean", "top_k_std", "center_shift_mean", "center_shift_std"]
DEFAULT_EPOCHS = 15
INFLUENCE_PAIR = (3, 8)


def fmt(v):
    """Fixed 9-significant-digit text for CSV cells."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.9g}"


def write_rows(path, fields, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(fields) + "\n")
        for r in rows:
            fh.write(",".join(fmt(r[f]) for f in fields) + "\n")


# --------------------------------------------------------------------------
# data and models

def synthetic_dataset(n=600, shape=(1, 8, 8), classes=10, seed=0, noise=0.15):
    """Noisy class prototypes in [0, 1]; a small stand-in for quick runs."""
    rng = np.random.default_rng(seed)
    protos = rng.random((classes,) + tuple(shape))
    y = rng.integers(0, classes, n)
    X = np.clip(protos[y] + noise * rng.normal(size=(n,) + tuple(shape)), 0, 1)
    split = int(0.8 * n)
    return (data.Dataset(X[:split], y[:split], "synthetic"),
            data.Dataset(X[split:], y[split:], "synthetic"))


def mnist_dir(dirpath=None):
    """Explicit dir, else $NNFRAG_DATA/mnist, else the converted mlxtend sample."""
    if dirpath:
        return Path(dirpath)
    root = data.data_root()
    if root is not None:
        for cand in (root / "mnist", root):
            if (cand / "t10k-images-idx3-ubyte").exists() or (cand / "t10k-images-idx3-ubyte.gz").exists():
                return cand
    cache = Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "nnfrag" / "mnist_sample"
    if not (cache / "t10k-images-idx3-ubyte").exists():
        data.write_mnist_sample(cache)
    return cache


def load_dataset(name, dirpath=None, seed=0):
    """(train, test) for ``mnist``, ``cifar10`` or ``synthetic``."""
    if name == "synthetic":
        return synthetic_dataset(seed=seed)
    if name == "mnist":
        d = mnist_dir(dirpath)
        return data.load_mnist(d, "train"), data.load_mnist(d, "test")
    if name == "cifar10":
        root = Path(dirpath) if dirpath else (data.data_root() or Path(".")) / "cifar10"
        return data.load_cifar10(root, "train"), data.load_cifar10(root, "test")
    raise ValueError(f"unknown dataset {name!r}")


def train_preset(name, train, seed=0, epochs=DEFAULT_EPOCHS, learning_rate=1e-3, batch_size=64):
    model = engine.preset(name, seed=seed, num_classes=int(train.labels.max()) + 1,
                          input_shape=train.images.shape[1:])
    cfg = engine.TrainConfig(epochs=epochs, learning_rate=learning_rate, batch_size=batch_size, seed=seed)
    return engine.train(model, train.images, train.labels, cfg)


def select_images(model, test, n, seed):
    """``n`` correctly classified test indices in a seeded random order."""
    order = np.random.default_rng(seed).permutation(len(test))
    pred = np.argmax(engine.forward(model.exact(), test.images[order]), axis=1)
    good = order[pred == test.labels[order]]
    if n > len(good):
        raise ValueError(f"only {len(good)} correctly classified images, {n} requested")
    return [int(i) for i in good[:n]]


def reference_for(kind, train, shape):
    if kind == "zeros":
        return interpret.ReferencePoint.zeros(shape)
    if kind == "pixelwise_mean":
        return interpret.ReferencePoint.pixelwise_mean(train.images)
    if kind == "channelwise_mean":
        return interpret.ReferencePoint.channelwise_mean(train.images)
    raise ValueError(f"unknown reference {kind!r}")


# --------------------------------------------------------------------------
# campaigns

@dataclass
class ExperimentSpec:
    dataset: str = "mnist"
    model_preset: str = "mlp_small"
    attacks: list = field(default_factory=lambda: ["random_sign", "top_k", "mass_center"])
    methods: list = field(default_factory=lambda: list(interpret.METHODS))
    epsilons: list = field(default_factory=lambda: [8 / 255])
    n_images: int = 50
    seed: int = 0
    output_dir: str = "campaign_out"
    P: int = 300
    alpha: float = 0.5 / 255
    k: int | None = None  # attacks.default_k of the input shape
    M: int = interpret.DEFAULT_M
    beta: float = engine.DEFAULT_BETA
    reference: str = "pixelwise_mean"
    epochs: int = DEFAULT_EPOCHS
    model_seed: int = 0
    n_angles: int = 0
    data_dir: str | None = None
    checkpoint: str | None = None
    threads: int = 1

    def __post_init__(self):
        self.attacks = [attacks.resolve_kind(a) for a in self.attacks]
        self.methods = [interpret.resolve_method(m) for m in self.methods]
        self.epsilons = [float(e) for e in self.epsilons]
        if self.n_images < 1:
            raise ValueError("n_images must be positive")

    def content(self):
        """Fields that determine results (not where they go or how fast)."""
        d = dataclasses.asdict(self)
        for key in ("output_dir", "threads"):
            d.pop(key)
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.content(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path, **overrides):
        """Flat ``key = value`` text; list values are comma separated."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = value
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(k, v) for k, v in kw.items()})


def _coerce(key, value):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", ""):
        return None
    if key in ("attacks", "methods"):
        return [v.strip() for v in value.split(",") if v.strip()]
    if key == "epsilons":
        return [_number(v) for v in value.split(",") if v.strip()]
    if key in ("n_images", "seed", "P", "k", "M", "epochs", "model_seed", "threads", "n_angles"):
        return int(value)
    if key in ("alpha", "beta"):
        return _number(value)
    return value


def _number(text):
    """Accept '8/255' style fractions as well as plain floats."""
    text = text.strip()
    if "/" in text:
        a, b = text.split("/")
        return float(a) / float(b)
    return float(text)


@dataclass
class RunManifest:
    spec: ExperimentSpec
    spec_hash: str
    version: str
    image_ids: list
    rows: list
    excluded: int
    times: dict
    maps: dict = field(default_factory=dict)
    output_dir: str = ""
    angles: list = field(default_factory=list)

    def to_json(self):
        return {"spec": dataclasses.asdict(self.spec), "spec_hash": self.spec_hash, "version": self.version,
                "image_ids": self.image_ids, "n_rows": len(self.rows), "excluded": self.excluded,
                "times": self.times, "angles": self.angles}


JOURNAL = "partial.jsonl"


def _attack_image(model, x, image_id, spec, ref):
    rows, maps = [], {}
    for method in spec.methods:
        before = interpret.saliency(method, model.exact(), x, ref, spec.M)
        for kind in spec.attacks:
            for eps in spec.epsilons:
                cfg = attacks.AttackConfig(kind, eps, spec.alpha, spec.P, spec.seed ^ image_id, method,
                                           spec.k, M=spec.M, reference=ref, beta=spec.beta)
                r = attacks.iterative_attack(model, x, cfg, before=before)
                rows.append({"image_id": image_id, "method": method, "attack": kind, "epsilon": eps,
                             "rank_corr": r.metrics.rank_correlation, "top_k": r.metrics.topk_intersection,
                             "k": r.metrics.k, "center_shift": r.metrics.center_shift,
                             "pred_preserved": bool(r.prediction_preserved)})
                if eps == max(spec.epsilons):
                    maps[(image_id, method, kind)] = (before.values, r.saliency_after.values)
    return rows, maps


def _journal_line(spec_hash, image_id, rows, maps):
    return json.dumps({"spec_hash": spec_hash, "image_id": image_id, "rows": rows,
                       "maps": [[m, k, b.tolist(), a.tolist()] for (_, m, k), (b, a) in maps.items()]})


def read_journal(path, spec_hash=None):
    """Finished images of a (possibly interrupted) campaign: {image_id: (rows, maps)}."""
    done = {}
    path = Path(path)
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break  # torn final line of an interrupted run
        if spec_hash is not None and rec["spec_hash"] != spec_hash:
            continue
        i = rec["image_id"]
        maps = {(i, m, k): (np.array(b), np.array(a)) for m, k, b, a in rec["maps"]}
        done[i] = (rec["rows"], maps)
    return done


def _row_key(r):
    return (r["image_id"], r["attack"], r["epsilon"], r["method"])


def summarize(rows, spec):
    """Means and standard deviations per (method, attack, epsilon) over rows
    whose prediction was preserved; others are only counted."""
    out = []
    for method in spec.methods:
        for kind in spec.attacks:
            for eps in spec.epsilons:
                sel = [r for r in rows if r["method"] == method and r["attack"] == kind and r["epsilon"] == eps]
                ok = [r for r in sel if r["pred_preserved"]]
                entry = {"method": method, "attack": kind, "epsilon": eps, "n": len(ok),
                         "excluded": len(sel) - len(ok)}
                for name in ("rank_corr", "top_k", "center_shift"):
                    vals = np.array([r[name] for r in ok], dtype=np.float64)
                    entry[name + "_mean"] = float(vals.mean()) if len(vals) else float("nan")
                    entry[name + "_std"] = float(vals.std()) if len(vals) else float("nan")
                out.append(entry)
    return out


def prepare(spec: ExperimentSpec, model=None, datasets=None):
    """(model, train, test) for a spec: checkpoint, given model or fresh training."""
    train, test = datasets or load_dataset(spec.dataset, spec.data_dir, spec.seed)
    if model is None:
        if spec.checkpoint:
            model = engine.load_checkpoint(spec.checkpoint)
        else:
            model = train_preset(spec.model_preset, train, spec.model_seed, spec.epochs)
    return model.exact(), train, test


def run_campaign(spec: ExperimentSpec, model=None, datasets=None, write=True, resume=True):
    """Attack ``n_images`` correctly classified test images with every
    (method, attack, epsilon) combination of the spec.

    Each finished image is appended to ``partial.jsonl`` in the output
    directory; a rerun of the same spec skips images already recorded there.
    """
    t0 = time.time()
    model, train, test = prepare(spec, model, datasets)
    t_model = time.time()
    ref = reference_for(spec.reference, train, model.input_shape)
    ids = select_images(model, test, spec.n_images, spec.seed)
    digest = spec.digest()
    out = Path(spec.output_dir)
    journal = out / JOURNAL
    done = read_journal(journal, digest) if (write and resume) else {}
    todo = [i for i in ids if i not in done]

    def work(i):
        return i, _attack_image(model, test.images[i], i, spec, ref)

    fh = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(journal, "w", encoding="utf-8")
        for i, (rows, maps) in done.items():  # drops any torn trailing record
            fh.write(_journal_line(digest, i, rows, maps) + "\n")
    try:
        pool = ThreadPoolExecutor(spec.threads) if spec.threads > 1 else None
        results = pool.map(work, todo) if pool else map(work, todo)
        for i, (rows, maps) in results:  # single writer, in image order
            done[i] = (rows, maps)
            if fh:
                fh.write(_journal_line(digest, i, rows, maps) + "\n")
                fh.flush()
        if pool:
            pool.shutdown()
    finally:
        if fh:
            fh.close()
    t_attack = time.time()
    rows = sorted((r for i in ids for r in done[i][0]), key=_row_key)
    maps = {k: v for i in ids for k, v in done[i][1].items()}
    angles = []
    if spec.n_angles:
        from .analysis import attack_angles
        sel = select_images(model, test, spec.n_angles, spec.seed)
        pairs = attack_angles(model.smooth(spec.beta), test.images[sel], seed=spec.seed)
        angles = [p.angle_deg for p in pairs]
    excluded = sum(1 for r in rows if not r["pred_preserved"])
    manifest = RunManifest(spec, digest, __version__, ids, rows, excluded,
                           {"model": t_model - t0, "attacks": t_attack - t_model,
                            "resumed_images": len(ids) - len(todo)}, maps, spec.output_dir, angles)
    if write:
        emit_report(manifest)
    return manifest


def load_manifest(dirpath):
    """Rebuild a manifest from a campaign directory (complete or partial)."""
    d = Path(dirpath)
    meta = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else None
    if meta is None:
        raise FileNotFoundError(f"{d}: no manifest.json")
    spec = ExperimentSpec(**meta["spec"])
    spec.output_dir = str(d)
    done = read_journal(d / JOURNAL, meta["spec_hash"])
    ids = [i for i in meta["image_ids"] if i in done]
    rows = sorted((r for i in ids for r in done[i][0]), key=_row_key)
    maps = {k: v for i in ids for k, v in done[i][1].items()}
    return RunManifest(spec, meta["spec_hash"], meta["version"], ids, rows,
                       sum(1 for r in rows if not r["pred_preserved"]), meta.get("times", {}), maps, str(d),
                       meta.get("angles", []))


def emit_report(manifest: RunManifest, pgm=True):
    """Write results.csv, summary.csv, curve and center-shift aggregates,
    before/after saliency PGMs and a short text report."""
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = manifest.spec
    write_rows(out / "results.csv", ROW_FIELDS, manifest.rows)
    summary = summarize(manifest.rows, spec) if manifest.rows else []
    write_rows(out / "summary.csv", SUMMARY_FIELDS, summary)
    curves = [{"method": s["method"], "attack": s["attack"], "metric": m, "epsilon": s["epsilon"],
               "mean": s[m + "_mean"]} for s in summary for m in ("rank_corr", "top_k")]
    write_rows(out / "curves.csv", ["method", "attack", "metric", "epsilon", "mean"], curves)
    write_rows(out / "center_shift.csv", ["method", "attack", "epsilon", "center_shift_mean", "center_shift_std"],
               summary)
    written = []
    if pgm and manifest.maps:
        (out / "saliency").mkdir(exist_ok=True)
        for (image_id, method, kind), (before, after) in sorted(manifest.maps.items()):
            for tag, vals in (("before", before), ("after", after)):
                p = out / "saliency" / f"img{image_id:05d}_{method}_{kind}_{tag}.pgm"
                interpret.write_pgm(p, vals)
                written.append(p.name)
    if manifest.angles:
        from .analysis import write_angles_csv
        write_angles_csv(out / "angles.csv", manifest.angles)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
    lines = [
        f"nnfrag {manifest.version}  spec {manifest.spec_hash}",
        f"images: {len(manifest.image_ids)}  rows: {len(manifest.rows)}  excluded (label changed): {manifest.excluded}",
        "",
        "results.csv       one row per image x method x attack x epsilon",
        "summary.csv       mean and std per method, attack and epsilon (preserved rows only)",
        "curves.csv        rank correlation and top-k intersection against epsilon, per attack kind",
        "center_shift.csv  center-of-mass displacement per attack kind",
        f"saliency/         {len(written)} PGM maps, before/after pairs at the largest epsilon",
        "angles.csv        angle between interpretation and prediction attack directions, with 5-degree"
        " histogram in angles_hist.csv" if manifest.angles else "",
        "",
    ]
    for s in summary:
        lines.append(f"{s['method']:22s} {s['attack']:12s} eps={s['epsilon'] * 255:5.1f}/255  "
                     f"rank={s['rank_corr_mean']:.3f}  top-k={s['top_k_mean']:.3f}  "
                     f"shift={s['center_shift_mean']:.3f}  n={s['n']}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return out


def load_results(path):
    """Read a results.csv back into row dicts."""
    rows = []
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    for line in lines[1:]:
        vals = dict(zip(head, line.split(",")))
        rows.append({"image_id": int(vals["image_id"]), "method": vals["method"], "attack": vals["attack"],
                     "epsilon": float(vals["epsilon"]), "rank_corr": float(vals["rank_corr"]),
                     "top_k": float(vals["top_k"]), "k": int(vals["k"]),
                     "center_shift": float(vals["center_shift"]), "pred_preserved": vals["pred_preserved"] == "1"})
    return rows


# --------------------------------------------------------------------------
# frozen-feature binary task for influence functions

@dataclass
class InfluenceTask:
    model: engine.Model
    train: data.Dataset
    test: data.Dataset
    cache: influence.InfluenceCache


def binary_subset(ds, pair=INFLUENCE_PAIR):
    keep = np.isin(ds.labels, pair)
    return data.Dataset(ds.images[keep], (ds.labels[keep] == pair[1]).astype(np.int64), ds.name)


def influence_task(train, test, seed=0, pair=INFLUENCE_PAIR, epochs=DEFAULT_EPOCHS, final_epochs=30,
                   damping=influence.DEFAULT_DAMPING):
    """Features from cnn_mnist trained on the other eight digits; a fresh
    two-way final layer trained on the held-out pair only."""
    rest = ~np.isin(train.labels, pair)
    others = [c for c in range(10) if c not in pair]
    relabel = {c: i for i, c in enumerate(others)}
    feat = engine.preset("cnn_mnist", seed=seed, num_classes=len(others), input_shape=train.images.shape[1:])
    feat = engine.train(feat, train.images[rest], np.array([relabel[c] for c in train.labels[rest]]),
                        engine.TrainConfig(epochs=epochs, seed=seed))
    k = feat.final_dense_index()
    head_in = feat.layers[k].W.shape[1]
    rng = np.random.default_rng(seed + 1)
    model = feat.copy()
    model.layers[k] = engine.Dense(rng.normal(0, np.sqrt(1.0 / head_in), size=(2, head_in)), np.zeros(2))
    model = engine.Model(model.layers, model.input_shape, "relu", model.beta, seed=seed)
    btrain, btest = binary_subset(train, pair), binary_subset(test, pair)
    model = engine.train(model, btrain.images, btrain.labels,
                         engine.TrainConfig(epochs=final_epochs, seed=seed, trainable="final",
                                            learning_rate=1e-2, weight_decay=damping))
    cache = influence.InfluenceCache(model, btrain.images, btrain.labels, damping)
    return InfluenceTask(model, btrain, btest, cache)


def run_influence_campaign(task, epsilons, n_images=50, seed=0, top_m=influence.DEFAULT_TOP_M):
    """Gradient-sign versus random-sign rows over correctly classified test
    images of the binary task."""
    ids = select_images(task.model, task.test, n_images, seed)
    rows = []
    for i in ids:
        z = (task.test.images[i], int(task.test.labels[i]))
        for eps in epsilons:
            out = influence.influence_attack_eval(task.model, None, z, eps, seed ^ i, top_m, cache=task.cache)
            for kind, rep, ok in (("gradient_sign", out.gradient, out.gradient_preserved),
                                  ("random_sign", out.random, out.random_preserved)):
                rows.append({"image_id": i, "attack": kind, "epsilon": eps, "rank_corr": rep.rank_correlation,
                             "top_k": rep.topk_intersection, "pred_preserved": ok})
    return rows


def influence_means(rows):
    out = {}
    for r in rows:
        if r["pred_preserved"]:
            out.setdefault((r["attack"], r["epsilon"]), []).append((r["rank_corr"], r["top_k"]))
    return {k: tuple(np.mean(v, axis=0)) for k, v in out.items()}
