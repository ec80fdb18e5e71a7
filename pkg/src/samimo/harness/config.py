"""Declarative experiment configs (YAML) with field-path validation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from samimo.csifb import CsiFbConfig, DecoderVariant
from samimo.scsap import ScsapConfig
from samimo.training import TrainSpec
from samimo.uadnet import UadNetConfig


class ConfigError(ValueError):
    """Validation failure; ``errors`` is a list of (field path, message)."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Training(_Strict):
    steps: int = Field(2000, ge=1)
    epochs: int = Field(10, ge=1)
    batch: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    optimizer: Literal["adam", "adamw", "sgd"] = "adam"
    weight_decay: float = Field(0.0, ge=0)

    def spec(self) -> TrainSpec:
        return TrainSpec(**self.model_dump())


# ---- uad


class UadChannel(_Strict):
    K: int = Field(32, ge=1)
    M: int = Field(16, ge=1)
    L_max: int = Field(16, ge=1)
    p_active: float = Field(0.1, gt=0, lt=1)
    snr_db: float = 10.0


class UadModel(_Strict):
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    L_train_range: tuple[int, int] = (6, 14)
    L_train_exclude: tuple[int, ...] = ()


class UadSweep(_Strict):
    L_test: list[int] = [6, 8, 10, 12, 14]
    n_trials: int = Field(2000, ge=100)
    amp_iters: int = Field(50, ge=1)
    plam_ablation: bool = True
    fixed_L: int | None = None


class UadDataset(_Strict):
    n_train: int = Field(256, ge=0)
    n_val: int = Field(256, ge=0)
    n_test: int = Field(256, ge=0)


class UadExperiment(_Strict):
    task: Literal["uad"]
    name: str = "uad"
    seed: int = Field(0, ge=0)
    output_dir: str | None = None
    channel: UadChannel = UadChannel()
    model: UadModel = UadModel()
    training: Training = Training()
    dataset: UadDataset = UadDataset()
    sweep: UadSweep = UadSweep()

    @model_validator(mode="after")
    def _check(self):
        errs = []
        for i, L in enumerate(self.sweep.L_test):
            if not 1 <= L <= self.channel.L_max:
                errs.append((f"sweep.L_test.{i}", f"length {L} outside [1, L_max={self.channel.L_max}]"))
        if not self.sweep.L_test:
            errs.append(("sweep.L_test", "grid must not be empty"))
        if self.sweep.fixed_L is not None and not 1 <= self.sweep.fixed_L <= self.channel.L_max:
            errs.append(("sweep.fixed_L", f"outside [1, L_max={self.channel.L_max}]"))
        try:
            self.net_config()
        except ValueError as exc:
            errs.append(("model", str(exc)))
        if errs:
            raise ConfigError(errs)
        return self

    def net_config(self, use_plam: bool = True) -> UadNetConfig:
        c, m = self.channel, self.model
        return UadNetConfig(
            K=c.K, M=c.M, L_max=c.L_max, d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads,
            use_plam=use_plam, L_train_range=tuple(m.L_train_range), L_train_exclude=tuple(m.L_train_exclude),
            p_active=c.p_active, snr_db=c.snr_db,
        )


# ---- csifb


class CsiChannel(_Strict):
    n_sub: int = Field(64, ge=2)
    n_clusters: int = Field(3, ge=1)
    feedback_snr_db: float = 10.0


class CsiModel(_Strict):
    N_t: int = Field(16, ge=1)
    N_c: int = Field(16, ge=1)
    n_ues: int = Field(2, ge=1)
    d_model: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1)
    L1: int = Field(2, ge=0)
    L2: int = Field(2, ge=0)
    L3: int = Field(1, ge=0)


class CsiSweep(_Strict):
    k_grid: list[int] = [8, 16, 32, 64]
    variants: list[DecoderVariant] = [DecoderVariant.RCA, DecoderVariant.PLAIN_CA, DecoderVariant.VANILLA]
    n_eval: int = Field(1000, ge=1)


class CsiDataset(_Strict):
    n_train: int = Field(8000, ge=1)
    n_val: int = Field(500, ge=0)
    n_test: int = Field(1000, ge=1)


class CsiExperiment(_Strict):
    task: Literal["csifb"]
    name: str = "csifb"
    seed: int = Field(0, ge=0)
    output_dir: str | None = None
    channel: CsiChannel = CsiChannel()
    model: CsiModel = CsiModel()
    training: Training = Training()
    dataset: CsiDataset = CsiDataset()
    sweep: CsiSweep = CsiSweep()

    @model_validator(mode="after")
    def _check(self):
        errs = []
        full = self.model.N_t * self.model.N_c
        for i, k in enumerate(self.sweep.k_grid):
            if not 1 <= k <= full:
                errs.append((f"sweep.k_grid.{i}", f"k={k} must lie in [1, N_t*N_c={full}]"))
        if self.model.N_c > self.channel.n_sub:
            errs.append(("model.N_c", f"N_c={self.model.N_c} exceeds channel.n_sub={self.channel.n_sub}"))
        if self.sweep.n_eval > self.dataset.n_test:
            errs.append(("sweep.n_eval", "cannot exceed dataset.n_test"))
        if not errs:
            try:
                self.net_config(self.sweep.k_grid[0] if self.sweep.k_grid else 1)
            except ValueError as exc:
                errs.append(("model", str(exc)))
        if errs:
            raise ConfigError(errs)
        return self

    def net_config(self, k: int) -> CsiFbConfig:
        m = self.model
        return CsiFbConfig(
            N_t=m.N_t, N_c=m.N_c, d_model=m.d_model, n_heads=m.n_heads, L1=m.L1, L2=m.L2, L3=m.L3,
            k=int(k), n_ues=m.n_ues, feedback_snr_db=self.channel.feedback_snr_db,
        )


# ---- scsap


class ScsapModel(_Strict):
    U: int = Field(2, ge=1)
    N_t: int = Field(8, ge=1)
    N_sc: int = Field(4, ge=1)
    H: int = Field(16, ge=1)
    W: int = Field(16, ge=1)
    C: int = Field(3, ge=1)
    patch: int = Field(2, ge=1)
    d_model: int = Field(32, ge=1)
    n_heads: int = Field(4, ge=1)
    window: int = Field(4, ge=1)
    shift: int = Field(2, ge=0)
    enc_blocks: int = Field(2, ge=1)
    dec_blocks: int = Field(2, ge=1)
    csi_layers: int = Field(1, ge=0)
    fusion_layers: int = Field(1, ge=0)
    dd_layers: int = Field(1, ge=0)
    symbols_per_token: int = Field(2, ge=1)
    wmmse_iters: int = Field(3, ge=1)
    power_budget: float = Field(1.0, gt=0)
    alpha_init: float = 0.0
    n_taps: int = Field(4, ge=1)
    snr_train: tuple[float, float] = (0.0, 15.0)


class ScsapSweep(_Strict):
    snr_grid: list[float] = [0.0, 5.0, 10.0, 15.0]
    schemes: list[Literal["scsap", "rzf_codec"]] = ["scsap", "rzf_codec"]


class ScsapData(_Strict):
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(0, ge=0)
    n_test: int = Field(300, ge=2)


class ScsapExperiment(_Strict):
    task: Literal["scsap"]
    name: str = "scsap"
    seed: int = Field(0, ge=0)
    output_dir: str | None = None
    model: ScsapModel = ScsapModel()
    training: Training = Training()
    dataset: ScsapData = ScsapData()
    sweep: ScsapSweep = ScsapSweep()

    @model_validator(mode="after")
    def _check(self):
        m = self.model
        errs = []
        if m.H % m.patch or m.W % m.patch:
            errs.append(("model.patch", f"patch {m.patch} must divide the {m.H}x{m.W} image"))
        else:
            gh, gw = m.H // m.patch, m.W // m.patch
            if gh % m.window or gw % m.window:
                errs.append(("model.window", f"window {m.window} must divide the {gh}x{gw} token grid"))
            elif not m.shift < m.window:
                errs.append(("model.shift", "shift must be smaller than the window"))
        if not errs:
            try:
                self.net_config()
            except ValueError as exc:
                errs.append(("model", str(exc)))
        if errs:
            raise ConfigError(errs)
        return self

    def net_config(self) -> ScsapConfig:
        d = self.model.model_dump()
        d["snr_train"] = tuple(d["snr_train"])
        return ScsapConfig(**d)


ExperimentConfig = Annotated[Union[UadExperiment, CsiExperiment, ScsapExperiment], Field(discriminator="task")]
_ADAPTER = TypeAdapter(ExperimentConfig)


def _loc(loc) -> str:
    # drop the discriminator tag pydantic inserts for tagged unions
    parts = [str(p) for p in loc]
    if parts and parts[0] in ("uad", "csifb", "scsap"):
        parts = parts[1:]
    return ".".join(parts) or "<root>"


def validate_config(data: dict):
    """Build a config from plain data, or raise :class:`ConfigError`."""
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as exc:
        errs = []
        for e in exc.errors():
            inner = (e.get("ctx") or {}).get("error")
            if isinstance(inner, ConfigError):
                errs.extend(inner.errors)
            else:
                errs.append((_loc(e["loc"]), e["msg"]))
        raise ConfigError(errs) from None


def loads_config(text: str):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"YAML parse error: {exc}")]) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    return validate_config(data)


def load_config(path):
    return loads_config(Path(path).read_text())


def dumps_config(cfg) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def save_config(cfg, path) -> None:
    Path(path).write_text(dumps_config(cfg))


def config_hash(cfg) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
