"""Experiment config files: strict YAML/JSON schema, canonical dump, reference text.

The file is a tree with five sections (``model``, ``federation``, ``devices``,
``plan``) plus ``seeds`` and ``output_dir``. Unknown keys are rejected, and so
are values of the wrong type; every error names the offending key path, for
example ``plan.clients[2].q``. Defaults come from the runtime dataclasses so the
file schema and the library never disagree.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import FederationSpec
from .engine import OptimizerConfig
from .errors import ConfigError
from .model import ModelConfig
from .protocols import Experiment, RunPlan
from .sim import DeviceProfile

SWEEP_PARAMS = ("q", "lambda", "dropout")


def _default(cls, name: str):
    f = {f.name: f for f in dataclasses.fields(cls)}[name]
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class ModelSection(_Section):
    hidden_dim: int = Field(_default(ModelConfig, "hidden_dim"), ge=1, description="width d of every block")
    num_middle_blocks: int = Field(_default(ModelConfig, "num_middle_blocks"), ge=1,
                                   description="M, the blocks that can sit on either side of the cut")
    block_kind: Literal["mlp_residual", "attention_mlp_residual"] = Field(
        _default(ModelConfig, "block_kind"), description="middle block type")
    seq_len: Optional[int] = Field(None, ge=1, description="tokens per sample; attention blocks only")


class FederationSection(_Section):
    num_clients: int = Field(_default(FederationSpec, "num_clients"), ge=1, description="N")
    input_dim: int = Field(_default(FederationSpec, "input_dim"), ge=1, description="feature width")
    num_classes: int = Field(_default(FederationSpec, "num_classes"), ge=2, description="K")
    samples_per_client: int = Field(_default(FederationSpec, "samples_per_client"), ge=2,
                                    description="train + test samples per shard")
    theta_max: float = Field(_default(FederationSpec, "theta_max"), ge=0.0, le=math.pi,
                             description="task heterogeneity; each plane rotates by a draw in [0, 0.75*theta_max]")
    label_skew_alpha: Optional[float] = Field(_default(FederationSpec, "label_skew_alpha"), gt=0.0,
                                              description="Dirichlet concentration; null = uniform labels")
    noise_sigma: float = Field(_default(FederationSpec, "noise_sigma"), ge=0.0, description="Gaussian noise std")
    prototype_norm: float = Field(_default(FederationSpec, "prototype_norm"), gt=0.0,
                                  description="length of every class prototype")
    train_fraction: float = Field(_default(FederationSpec, "train_fraction"), gt=0.0, lt=1.0,
                                  description="share of each shard used for training")


class DeviceSection(_Section):
    fwd_seconds_per_block_per_sample: float = Field(
        _default(DeviceProfile, "fwd_seconds_per_block_per_sample"), gt=0.0,
        description="forward cost of one block on one sample")
    bwd_multiplier: float = Field(_default(DeviceProfile, "bwd_multiplier"), gt=0.0,
                                  description="backward cost relative to forward")
    memory_bytes_budget: int = Field(_default(DeviceProfile, "memory_bytes_budget"), gt=0,
                                     description="peak bytes the device can hold")
    uplink_bytes_per_s: float = Field(_default(DeviceProfile, "uplink_bytes_per_s"), gt=0.0, description="")
    downlink_bytes_per_s: float = Field(_default(DeviceProfile, "downlink_bytes_per_s"), gt=0.0, description="")
    latency_s: float = Field(_default(DeviceProfile, "latency_s"), ge=0.0, description="one-way frame latency")
    dropout_prob: float = Field(_default(DeviceProfile, "dropout_prob"), ge=0.0, le=1.0,
                                description="chance of sitting out a step (flexp) or round (baselines)")


def _default_devices() -> dict[str, DeviceSection]:
    return {"fast": DeviceSection(), "slow": DeviceSection(fwd_seconds_per_block_per_sample=1e-2)}


class ClientSection(_Section):
    q: float = Field(0.5, ge=0.0, le=1.0, description="share of middle blocks kept on the client")
    device: str = Field("fast", description="key into the devices section")


class OptimizerSection(_Section):
    kind: Literal["sgd", "adam"] = Field(_default(OptimizerConfig, "kind"), description="update rule")
    lr: float = Field(_default(OptimizerConfig, "lr"), gt=0.0, description="learning rate")
    # a list rather than a tuple so that a dumped config parses back under strict mode
    betas: list[float] = Field(list(_default(OptimizerConfig, "betas")), min_length=2, max_length=2,
                               description="Adam moment decays")
    eps: float = Field(_default(OptimizerConfig, "eps"), gt=0.0, description="Adam denominator floor")


_AGGREGATION_KEYS = ("aggregation_period", "local_steps", "sfl_q")


class PlanSection(_Section):
    protocol: Literal["flexp_sfl", "sfl", "fedavg"] = Field("flexp_sfl", description="sfl and fedavg are the baselines")
    target_steps: Optional[int] = Field(_default(RunPlan, "target_steps"), ge=1,
                                        description="stop after this many step attempts across all clients")
    time_budget_s: Optional[float] = Field(None, gt=0.0,
                                           description="or stop at this simulated time (then target_steps: null)")
    clients: Optional[list[ClientSection]] = Field(
        None, description="one entry per client; default is q 0.5 everywhere, the last client on 'slow'")
    sfl_q: Optional[float] = Field(None, ge=0.0, le=1.0, description="sfl cut; default median client q")
    aggregation_period: int = Field(_default(RunPlan, "aggregation_period"), ge=1,
                                    description="baselines: rounds between averaging (E)")
    local_steps: int = Field(_default(RunPlan, "local_steps"), ge=1, description="fedavg: local steps per round (H)")
    lam: float = Field(_default(RunPlan, "lam"), ge=0.0, description="alignment weight lambda")
    align_every: Optional[int] = Field(_default(RunPlan, "align_every"), ge=1,
                                       description="probe cadence in client steps; null disables probes")
    batch_size: int = Field(_default(RunPlan, "batch_size"), ge=1, description="samples per client step")
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection, description="")
    pretrain_steps: int = Field(_default(RunPlan, "pretrain_steps"), ge=0,
                                description="pooled-data steps applied to the shared initial model")
    pretrain_lr: float = Field(_default(RunPlan, "pretrain_lr"), gt=0.0, description="learning rate for pretrain_steps")
    element_size: Literal[4, 8] = Field(_default(RunPlan, "element_size"), description="bytes per float on the wire")
    server_seconds_per_block_per_sample: float = Field(0.0, ge=0.0, description="0 = instant server")
    reconnect_s: float = Field(_default(RunPlan, "reconnect_s"), ge=0.0,
                               description="extra wait after a dropped flexp step")

    @model_validator(mode="before")
    @classmethod
    def _budget_implies_no_step_target(cls, data):
        if isinstance(data, dict) and data.get("time_budget_s") is not None and "target_steps" not in data:
            data = {**data, "target_steps": None}
        return data

    @model_validator(mode="after")
    def _check(self):
        if (self.target_steps is None) == (self.time_budget_s is None):
            raise ValueError("exactly one of target_steps and time_budget_s must be set")
        if self.protocol == "flexp_sfl":
            explicit = [k for k in _AGGREGATION_KEYS if k in self.model_fields_set]
            if explicit:
                raise ValueError(f"flexp_sfl does not aggregate; remove {', '.join(explicit)}")
        return self


class ExperimentConfig(_Section):
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1, description="one run per seed")
    output_dir: str = Field("runs", description="where run/sweep write CSV files")
    model: ModelSection = Field(default_factory=ModelSection, description="")
    federation: FederationSection = Field(default_factory=FederationSection, description="")
    devices: dict[str, DeviceSection] = Field(
        default_factory=_default_devices,
        description="named device profiles; 'slow' differs from 'fast' only in a 10x forward cost")
    plan: PlanSection = Field(default_factory=PlanSection, description="")

    @model_validator(mode="after")
    def _cross_check(self):
        n = self.federation.num_clients
        if self.plan.clients is not None:
            if len(self.plan.clients) != n:
                raise ValueError(f"plan.clients has {len(self.plan.clients)} entries for {n} clients")
            for i, c in enumerate(self.plan.clients):
                if c.device not in self.devices:
                    raise ValueError(f"plan.clients[{i}].device: unknown device {c.device!r}")
        elif not {"fast", "slow"} <= set(self.devices) and n > 0:
            raise ValueError("plan.clients is required when the devices section lacks 'fast' and 'slow'")
        if self.model.block_kind == "attention_mlp_residual" and self.model.seq_len is None:
            raise ValueError("model.seq_len is required for attention_mlp_residual")
        if self.model.block_kind == "mlp_residual" and self.model.seq_len is not None:
            raise ValueError("model.seq_len only applies to attention_mlp_residual")
        return self

    def client_list(self) -> list[ClientSection]:
        if self.plan.clients is not None:
            return list(self.plan.clients)
        n = self.federation.num_clients
        return [ClientSection(device="slow" if i == n - 1 and n > 1 else "fast") for i in range(n)]


# ---------------------------------------------------------------------------
# loading and errors


def _type_name(ann) -> str:
    origin = typing.get_origin(ann)
    if origin is typing.Union:
        args = [a for a in typing.get_args(ann) if a is not type(None)]
        return " or ".join(_type_name(a) for a in args) + " or null"
    if origin is Literal:
        return "one of " + ", ".join(repr(a) for a in typing.get_args(ann))
    if origin in (list, tuple, dict):
        return f"{origin.__name__}"
    if isinstance(ann, type) and issubclass(ann, BaseModel):
        return "mapping"
    return getattr(ann, "__name__", str(ann))


def _expected(loc: tuple) -> str | None:
    ann: Any = ExperimentConfig
    for part in loc:
        origin = typing.get_origin(ann)
        if origin is typing.Union:
            ann = next(a for a in typing.get_args(ann) if a is not type(None))
            origin = typing.get_origin(ann)
        if isinstance(part, int) and origin in (list, tuple):
            ann = typing.get_args(ann)[0]
        elif isinstance(part, str) and origin is dict:
            ann = typing.get_args(ann)[1]
        elif isinstance(part, str) and isinstance(ann, type) and issubclass(ann, BaseModel):
            field = ann.model_fields.get(part)
            if field is None:
                return None
            ann = field.annotation
        else:
            return None
    return _type_name(ann)


def _path(loc: tuple) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        elif isinstance(part, str) and not part.startswith(("function-", "literal[")) and part not in (
                "tagged-union", "list", "dict"):
            out += f".{part}" if out else part
    return out or "<root>"


def _config_error(err: ValidationError) -> ConfigError:
    lines, first = [], None
    for e in err.errors():
        path = _path(e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        elif e["type"] != "value_error":
            want = _expected(tuple(p for p in e["loc"] if not (isinstance(p, str) and "[" in p)))
            if want:
                msg += f" (expected {want})"
        if e["type"] in ("value_error", "assertion_error") and ":" in msg and path == "<root>":
            path, msg = msg.split(":", 1)[0], msg.split(":", 1)[1].strip()
        first = first or path
        lines.append(f"{path}: {msg}" if lines else msg)
    return ConfigError(first, "; ".join(lines))


def parse_config(tree: Any) -> ExperimentConfig:
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("<root>", f"expected a mapping at the top level, got {type(tree).__name__}")
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise _config_error(e) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    text = path.read_text()
    try:
        tree = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(str(path), f"not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {e}") from None
    return parse_config(tree)


def to_tree(cfg: ExperimentConfig) -> dict:
    """Fully populated plain-data form; the canonical content of a config."""
    tree = cfg.model_dump(mode="json")
    if cfg.plan.protocol == "flexp_sfl":
        for k in _AGGREGATION_KEYS:
            tree["plan"].pop(k)
    return tree


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_tree(cfg), sort_keys=False, default_flow_style=False)


# ---------------------------------------------------------------------------
# conversion to runtime objects


def to_experiment(cfg: ExperimentConfig) -> Experiment:
    fed = cfg.federation
    model = ModelConfig(
        input_dim=fed.input_dim, hidden_dim=cfg.model.hidden_dim,
        num_middle_blocks=cfg.model.num_middle_blocks, num_classes=fed.num_classes,
        block_kind=cfg.model.block_kind, seq_len=cfg.model.seq_len,
    )
    spec = FederationSpec(**fed.model_dump())
    clients = cfg.client_list()
    devices = [DeviceProfile(name=c.device, **cfg.devices[c.device].model_dump()) for c in clients]
    p = cfg.plan
    plan = RunPlan(
        protocol=p.protocol, target_steps=p.target_steps, time_budget_s=p.time_budget_s,
        q=[c.q for c in clients], sfl_q=p.sfl_q, aggregation_period=p.aggregation_period,
        local_steps=p.local_steps, lam=p.lam, align_every=p.align_every, batch_size=p.batch_size,
        optimizer=OptimizerConfig(**{**p.optimizer.model_dump(), "betas": tuple(p.optimizer.betas)}), pretrain_steps=p.pretrain_steps,
        pretrain_lr=p.pretrain_lr, element_size=p.element_size,
        server_seconds_per_block_per_sample=p.server_seconds_per_block_per_sample,
        reconnect_s=p.reconnect_s,
    )
    return Experiment(model, spec, devices, plan)


def with_override(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    """Copy of ``cfg`` with one sweep parameter set everywhere it applies."""
    tree = cfg.model_dump(mode="python")
    if param == "q":
        tree["plan"]["clients"] = [{**c.model_dump(), "q": value} for c in cfg.client_list()]
    elif param == "lambda":
        tree["plan"]["lam"] = value
    elif param == "dropout":
        for d in tree["devices"].values():
            d["dropout_prob"] = value
    else:
        raise ConfigError("--param", f"expected one of {', '.join(SWEEP_PARAMS)}, got {param!r}")
    if cfg.plan.protocol == "flexp_sfl":
        for k in _AGGREGATION_KEYS:
            if k not in cfg.plan.model_fields_set:
                tree["plan"].pop(k)
    return parse_config(tree)


# ---------------------------------------------------------------------------
# generated reference


_BOUND_SYMBOLS = {"Ge": (">=", "ge"), "Gt": (">", "gt"), "Le": ("<=", "le"), "Lt": ("<", "lt"),
                  "MinLen": ("length >=", "min_length"), "MaxLen": ("length <=", "max_length")}


def _reference_lines(model: type[BaseModel], prefix: str, out: list[str]) -> None:
    for name, field in model.model_fields.items():
        key = f"{prefix}{name}"
        ann = field.annotation
        inner = ann
        if typing.get_origin(ann) is typing.Union:
            inner = next(a for a in typing.get_args(ann) if a is not type(None))
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out.append(f"{key}:")
            _reference_lines(ann, key + ".", out)
            continue
        default = field.get_default(call_default_factory=True)
        if isinstance(default, dict):
            # device profiles: list the names; their fields are described below
            default = {k: "..." for k in default}
        bounds = []
        for m in field.metadata:
            sym = _BOUND_SYMBOLS.get(type(m).__name__)
            if sym:
                bounds.append(f"{sym[0]} {getattr(m, sym[1])}")
        desc = field.description or ""
        extra = f"  [{', '.join(bounds)}]" if bounds else ""
        out.append(f"{key} ({_type_name(ann)}) = {json.dumps(default)}{extra}{'  # ' + desc if desc else ''}")
        item = typing.get_args(inner)[-1] if typing.get_origin(inner) in (list, dict) else None
        if isinstance(item, type) and issubclass(item, BaseModel):
            sub = f"{key}[i]." if typing.get_origin(inner) is list else f"{key}.<name>."
            _reference_lines(item, sub, out)


def config_reference() -> str:
    out = ["# every config key, its type and default (generated)"]
    _reference_lines(ExperimentConfig, "", out)
    return "\n".join(out) + "\n"
