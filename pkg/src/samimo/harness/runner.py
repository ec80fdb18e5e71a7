"""Dataset generation, training, evaluation and results persistence.

This is the only layer that touches the filesystem.  Output layout under the
run directory::

    data/<split>.ac          array containers (manifest records the seeds)
    data/<split>.json        sidecar: seeds, environment parameters, config
    checkpoints/<model>.ckpt one container per trained network
    curves.csv               model, epoch, loss
    results.csv              task-specific metric table
    samples.ac               per-trial / per-sample metric arrays
    records/<hash>-<n>.json  append-only run records
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

import samimo
from samimo import container, csifb, randaccess as ra, scsap, uadnet
from samimo.harness.config import CsiExperiment, ScsapExperiment, UadExperiment, config_hash
from samimo.rng import RandomSource

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SAMIMO_OUTPUT_ROOT"
SPLITS = {"train": 1, "val": 2, "test": 3}
RESULT_COLUMNS = {
    "uad": ["scheme", "L_test", "n_trials", "P_e", "stderr"],
    "csifb": ["variant", "k", "r", "feedback_snr_db", "nmse_db", "stderr"],
    "scsap": ["scheme", "snr_db", "psnr_db", "mse", "stderr"],
}


@dataclass
class ResultsRecord:
    task: str
    name: str
    config_hash: str
    code_version: str
    wall_clock_s: float
    rows: list[dict] = field(default_factory=list)


def output_dir(cfg) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / cfg.name


def _write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def _write_split(path: Path, arrays: dict, meta: dict, cfg) -> None:
    """Container plus a JSON sidecar with the seeds and environment parameters."""
    _write(path, container.pack(arrays, meta))
    side = {**meta, "task": cfg.task, "config_hash": config_hash(cfg), "config": cfg.model_dump(mode="json"),
            "arrays": {k: {"shape": list(np.shape(v)), "dtype": container.dtype_tag(np.asarray(v).dtype)} for k, v in arrays.items()}}
    _write(path.with_suffix(".json"), (json.dumps(side, indent=1, sort_keys=True) + "\n").encode())


def load_container(path) -> tuple[dict, dict]:
    return container.unpack(Path(path).read_bytes())


def _root(cfg) -> RandomSource:
    return RandomSource(cfg.seed)


# --------------------------------------------------------------------------
# datasets


def _uad_book(cfg: UadExperiment) -> ra.PreambleBook:
    c = cfg.channel
    return ra.generate_qpsk_preambles(c.K, c.L_max, _root(cfg).child(0))


def _uad_split(cfg: UadExperiment, book, n: int, lengths, rng: RandomSource) -> dict:
    if n == 0:
        return {"cov": np.zeros((0, cfg.channel.L_max, cfg.channel.L_max), np.complex64),
                "activity": np.zeros((0, cfg.channel.K), np.int8), "L": np.zeros(0, np.int64)}
    L = rng.gen.choice(np.asarray(lengths), size=n)
    covs, acts = uadnet.simulate_batch(cfg.net_config(), book, L, rng)
    return {"cov": covs.astype(np.complex64), "activity": acts, "L": L.astype(np.int64)}


def gen_dataset(cfg) -> dict[str, Path]:
    """Write train/val/test containers; split s uses stream ``seed/(s,)``."""
    out = output_dir(cfg) / "data"
    root = _root(cfg)
    paths = {}
    if isinstance(cfg, UadExperiment):
        book = _uad_book(cfg)
        paths["preambles"] = out / "preambles.ac"
        _write(paths["preambles"], container.pack({"p": book.p}, {"seed": cfg.seed, "stream": [0]}))
        sizes = {"train": cfg.dataset.n_train, "val": cfg.dataset.n_val, "test": cfg.dataset.n_test}
        for split, sid in SPLITS.items():
            lengths = cfg.sweep.L_test if split == "test" else cfg.net_config().train_lengths()
            arrays = _uad_split(cfg, book, sizes[split], lengths, root.child(sid))
            paths[split] = out / f"{split}.ac"
            _write_split(paths[split], arrays, {"seed": cfg.seed, "stream": [sid], "split": split}, cfg)
    elif isinstance(cfg, CsiExperiment):
        sizes = {"train": cfg.dataset.n_train, "val": cfg.dataset.n_val, "test": cfg.dataset.n_test}
        base = cfg.net_config(cfg.sweep.k_grid[0])
        env = {"n_clusters": cfg.channel.n_clusters}
        for split, sid in SPLITS.items():
            h = csifb.generate_dataset(base, sizes[split], root.child(sid), n_sub=cfg.channel.n_sub, env_kwargs=env)
            paths[split] = out / f"{split}.ac"
            meta = {"seed": cfg.seed, "stream": [sid], "split": split, "n_sub": cfg.channel.n_sub, "env": env}
            _write_split(paths[split], {"h_ad": h}, meta, cfg)
    elif isinstance(cfg, ScsapExperiment):
        net_cfg = cfg.net_config()
        sizes = {"train": cfg.dataset.n_train, "val": cfg.dataset.n_val, "test": cfg.dataset.n_test}
        for split, sid in SPLITS.items():
            ds = scsap.generate_dataset(net_cfg, sizes[split], root.child(sid))
            paths[split] = out / f"{split}.ac"
            meta = {"seed": cfg.seed, "stream": [sid], "split": split}
            _write_split(paths[split], {"images": ds.images, "channels": ds.channels}, meta, cfg)
    else:
        raise TypeError(f"unsupported config type {type(cfg).__name__}")
    return paths


def _ensure_data(cfg) -> Path:
    d = output_dir(cfg) / "data"
    if not all((d / f"{s}.ac").exists() for s in SPLITS):
        gen_dataset(cfg)
    return d


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, net: torch.nn.Module, model_name: str, init_seed: int, net_config: dict) -> None:
    cfg = {"model": model_name, **net_config}
    _write(path, container.pack_state(net.state_dict(), init_seed, cfg))


def _net_config_dict(net_cfg) -> dict:
    d = asdict(net_cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def load_checkpoint(path, task: str):
    """Rebuild the network stored at ``path``; returns (model name, net)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    state, _, meta = container.unpack_state(p.read_bytes())
    meta = dict(meta)
    name = meta.pop("model")
    if task == "uad":
        net = uadnet.UadNet(uadnet.UadNetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()}))
    elif task == "csifb":
        variant = csifb.DecoderVariant(meta.pop("variant"))
        net = csifb.CsiFeedbackNet(csifb.CsiFbConfig(**meta), variant)
    elif task == "scsap":
        scheme = meta.pop("scheme")
        c = scsap.ScsapConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()})
        net = scsap.FORWARDS[scheme][0](c)
    else:
        raise ValueError(f"unknown task {task!r}")
    net.load_state_dict(state)
    net.eval()
    return name, net


# --------------------------------------------------------------------------
# training


def _uad_models(cfg: UadExperiment):
    """(name, UadNetConfig, fixed_L, stream id) for every network the run needs."""
    out = [("sa_uadnet_vpl", cfg.net_config(True), None, 10)]
    if cfg.sweep.plam_ablation:
        out.append(("sa_uadnet_vpl_no_plam", cfg.net_config(False), None, 11))
    if cfg.sweep.fixed_L is not None:
        out.append((f"fixed_L{cfg.sweep.fixed_L}", cfg.net_config(True), cfg.sweep.fixed_L, 12))
    return out


def _csi_models(cfg: CsiExperiment):
    out = []
    for vi, v in enumerate(cfg.sweep.variants):
        for ki, k in enumerate(cfg.sweep.k_grid):
            out.append((f"{v.value}_k{k}", v, int(k), (10, vi, ki)))
    return out


def _write_curves(path: Path, curves: dict[str, list[float]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "epoch", "loss"])
    for name, curve in curves.items():
        for i, v in enumerate(curve):
            w.writerow([name, i + 1, repr(float(v))])
    _write(path, buf.getvalue().encode())


def train(cfg) -> dict:
    """Train every network of the config; checkpoints land in ``checkpoints/``."""
    torch.set_num_threads(1)
    out = output_dir(cfg)
    root = _root(cfg)
    spec = cfg.training.spec()
    models, curves = {}, {}
    if isinstance(cfg, UadExperiment):
        book = _uad_book(cfg)
        for name, net_cfg, fixed_L, sid in _uad_models(cfg):
            rng = root.child(sid)
            net, curve = uadnet.train_uadnet(net_cfg, spec, book, rng, fixed_L=fixed_L)
            save_checkpoint(out / "checkpoints" / f"{name}.ckpt", net, name, rng.child(0).integer_seed(), _net_config_dict(net_cfg))
            models[name], curves[name] = net, curve
    elif isinstance(cfg, CsiExperiment):
        data, _ = load_container(_ensure_data(cfg) / "train.ac")
        for name, variant, k, sid in _csi_models(cfg):
            rng = root.child(*sid)
            net_cfg = cfg.net_config(k)
            net, curve = csifb.train_csifb(net_cfg, variant, data["h_ad"], spec, rng)
            meta = {**_net_config_dict(net_cfg), "variant": variant.value}
            save_checkpoint(out / "checkpoints" / f"{name}.ckpt", net, name, rng.child(0).integer_seed(), meta)
            models[name], curves[name] = net, curve
    elif isinstance(cfg, ScsapExperiment):
        arrays, _ = load_container(_ensure_data(cfg) / "train.ac")
        ds = scsap.ScsapDataset(arrays["images"], arrays["channels"])
        net_cfg = cfg.net_config()
        for i, scheme in enumerate(cfg.sweep.schemes):
            rng = root.child(10, i)
            net, curve = scsap.train_scsap(net_cfg, ds, spec, rng, scheme=scheme)
            meta = {**_net_config_dict(net_cfg), "scheme": scheme}
            save_checkpoint(out / "checkpoints" / f"{scheme}.ckpt", net, scheme, rng.child(0).integer_seed(), meta)
            models[scheme], curves[scheme] = net, curve
    else:
        raise TypeError(f"unsupported config type {type(cfg).__name__}")
    _write_curves(out / "curves.csv", curves)
    return models


def load_models(cfg, checkpoint=None) -> dict:
    if checkpoint is not None:
        name, net = load_checkpoint(checkpoint, cfg.task)
        return {name: net}
    d = output_dir(cfg) / "checkpoints"
    if isinstance(cfg, UadExperiment):
        names = [m[0] for m in _uad_models(cfg)]
    elif isinstance(cfg, CsiExperiment):
        names = [m[0] for m in _csi_models(cfg)]
    else:
        names = list(cfg.sweep.schemes)
    models = {}
    for n in names:
        p = d / f"{n}.ckpt"
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}; run `samimo train` first")
        models[n] = load_checkpoint(p, cfg.task)[1]
    return models


# --------------------------------------------------------------------------
# evaluation


def evaluate(cfg, models: dict) -> list[dict]:
    """Run the task sweep; writes results.csv and samples.ac, returns rows."""
    torch.set_num_threads(1)
    out = output_dir(cfg)
    eval_rng = _root(cfg).child(20)
    samples = {}
    if isinstance(cfg, UadExperiment):
        book = _uad_book(cfg)
        schemes = {n: uadnet.NeuralDetector(m) for n, m in models.items()}
        schemes.update({"omp": "omp", "amp": "amp"})
        res = uadnet.evaluate_pe_sweep(
            schemes, cfg.net_config(), book, cfg.sweep.L_test, cfg.sweep.n_trials, cfg.channel.snr_db, eval_rng, cfg.sweep.amp_iters
        )
        rows = [{"scheme": r.scheme, "L_test": r.L_test, "n_trials": r.n_trials, "P_e": r.P_e, "stderr": r.stderr} for r in res]
        samples = {f"{r.scheme}|{r.L_test}": r.per_trial for r in res}
    elif isinstance(cfg, CsiExperiment):
        test, _ = load_container(_ensure_data(cfg) / "test.ac")
        keyed = {}
        for name, m in models.items():
            keyed[(m.variant.value, m.cfg.k)] = m
        variants = sorted({v for v, _ in keyed}, key=[v.value for v in csifb.DecoderVariant].index)
        ks = sorted({k for _, k in keyed})
        res = csifb.evaluate_nmse_sweep(cfg.net_config(ks[0]), ks, variants, keyed, test["h_ad"], cfg.sweep.n_eval, eval_rng)
        rows = [
            {"variant": r.variant, "k": r.k, "r": r.r, "feedback_snr_db": r.feedback_snr_db, "nmse_db": r.nmse_db, "stderr": r.stderr}
            for r in res
        ]
        samples = {f"{r.variant}|{r.k}": r.per_sample for r in res}
    elif isinstance(cfg, ScsapExperiment):
        test, _ = load_container(_ensure_data(cfg) / "test.ac")
        ds = scsap.ScsapDataset(test["images"], test["channels"])
        res = scsap.evaluate_quality_sweep(models, ds, cfg.sweep.snr_grid, eval_rng)
        rows = [{"scheme": r.scheme, "snr_db": r.snr_db, "psnr_db": r.psnr_db, "mse": r.mse, "stderr": r.stderr} for r in res]
        samples = {f"{r.scheme}|{r.snr_db:g}": r.per_sample for r in res}
    else:
        raise TypeError(f"unsupported config type {type(cfg).__name__}")
    write_results_csv(out / "results.csv", cfg.task, rows)
    _write(out / "samples.ac", container.pack({k: np.asarray(v, dtype=np.float64) for k, v in samples.items()}))
    return rows


def write_results_csv(path: Path, task: str, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS[task], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    _write(path, buf.getvalue().encode())


def append_record(cfg, rec: ResultsRecord) -> Path:
    d = output_dir(cfg) / "records"
    d.mkdir(parents=True, exist_ok=True)
    n = 0
    while (d / f"{rec.config_hash}-{n}.json").exists():
        n += 1
    path = d / f"{rec.config_hash}-{n}.json"
    with open(path, "x") as fh:  # never overwrite an earlier record
        json.dump(asdict(rec), fh, indent=1)
    return path


def run(cfg) -> ResultsRecord:
    """Generate data if needed, train, evaluate, and append a run record."""
    t0 = time.perf_counter()
    _ensure_data(cfg)
    models = train(cfg)
    rows = evaluate(cfg, models)
    rec = ResultsRecord(cfg.task, cfg.name, config_hash(cfg), samimo.__version__, time.perf_counter() - t0, rows)
    append_record(cfg, rec)
    return rec
