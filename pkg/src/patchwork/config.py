"""Sectioned key-value configuration ([scheme], [model], [train], [apply]).

Values are JSON literals (``32``, ``[32, 32]``, ``true``, ``"cos"``); a value
that does not parse as JSON is taken as a bare string.
"""
from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geometry import AugmentParams
from .infer import InferConfig
from .model import ModelSpec
from .sampler import SCHEME_KEYS
from .train import BalanceSpec, TrainConfig

AUGMENT_KEYS = {"augment.dphi", "augment.flip", "augment.dscale", "independent_augmentation"}
SECTION_KEYS = {
    "scheme": set(SCHEME_KEYS),
    "model": {"intermediate_out", "block_out", "identical_blocks", "hidden", "n_conv", "kernel",
              "global_context", "finalBlock", "forward_type", "dtype"},
    "train": {"num_its", "epochs", "num_patches", "batch_size", "intermediate_loss",
              "balance.ratio", "balance.label_weight", "balance.autoweight", "hard_mining",
              "hard_mining_order", "hard_mining_maxage", "dontcare", "learning_rate",
              "beta1", "beta2", "eps", "parallel"} | AUGMENT_KEYS,
    "apply": {"generate_type", "num_patches", "branch_factor", "num_chunks", "lazyEval.fraction",
              "lazyEval.reduceFun", "lazyEval.attentionFun", "window", "sparse_suppression",
              "out_typ", "ce_threshold", "sampling_factor", "level", "jitter", "batch_size",
              "augment"} | AUGMENT_KEYS,
}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


@dataclass
class Config:
    sections: dict[str, dict] = field(default_factory=lambda: {s: {} for s in SECTION_KEYS})

    def __post_init__(self):
        for s in SECTION_KEYS:
            self.sections.setdefault(s, {})
        self.validate()

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self.sections == other.sections

    # -- parsing ------------------------------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> "Config":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        sections = {}
        for name in cp.sections():
            if name not in SECTION_KEYS:
                raise ConfigError(f"unknown section [{name}]")
            sections[name] = {k: _parse_value(v) for k, v in cp[name].items()}
        return cls(sections)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.parse(text)

    def dumps(self) -> str:
        buf = io.StringIO()
        for name in SECTION_KEYS:
            buf.write(f"[{name}]\n")
            for k in sorted(self.sections[name]):
                buf.write(f"{k} = {json.dumps(self.sections[name][k])}\n")
            buf.write("\n")
        return buf.getvalue()

    def validate(self) -> None:
        for name, values in self.sections.items():
            if name not in SECTION_KEYS:
                raise ConfigError(f"unknown section [{name}]")
            unknown = set(values) - SECTION_KEYS[name]
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        sch = self.sections["scheme"]
        if sch:
            for a, b in (("fov_mm", "fov_rel"), ("destvox_mm", "destvox_rel")):
                if (a in sch) == (b in sch):
                    raise ConfigError(f"[scheme] needs exactly one of {a} / {b}")

    # -- typed views ----------------------------------------------------------------------

    def scheme_cfg(self) -> dict:
        if not self.sections["scheme"]:
            raise ConfigError("config has no [scheme] section")
        return dict(self.sections["scheme"])

    def model_spec(self, input_channels: int) -> ModelSpec:
        sch, m = self.scheme_cfg(), self.sections["model"]
        try:
            return ModelSpec(
                ndim=int(sch.get("ndim", 2)), depth=int(sch.get("depth", 1)),
                input_channels=input_channels, num_labels=self.num_labels(),
                intermediate_out=int(m.get("intermediate_out", 0)), block_out=m.get("block_out"),
                identical_blocks=bool(m.get("identical_blocks", False)),
                categorical=bool(sch.get("categorical", False)), hidden=int(m.get("hidden", 16)),
                n_conv=int(m.get("n_conv", 2)), kernel=int(m.get("kernel", 3)),
                global_context=bool(m.get("global_context", False)),
                final_block=bool(m.get("finalBlock", False)),
                forward_type=m.get("forward_type", "simple"), dtype=m.get("dtype", "float32"),
                categorial_label=sch.get("categorial_label"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[model]: {e}") from None

    def num_labels(self) -> int:
        sch = self.sections["scheme"]
        if sch.get("categorial_label") is not None:
            return len(sch["categorial_label"])
        return int(sch.get("num_labels", 1))

    def _augment(self, section: str, ndim: int) -> AugmentParams:
        s = self.sections[section]
        cfg = {k.split(".", 1)[-1]: v for k, v in s.items() if k in AUGMENT_KEYS}
        return AugmentParams.from_dict(cfg, ndim)

    def train_config(self) -> TrainConfig:
        t = self.sections["train"]
        ndim = int(self.sections["scheme"].get("ndim", 2))
        try:
            lw = t.get("balance.label_weight")
            return TrainConfig(
                num_its=int(t.get("num_its", 10)), epochs=int(t.get("epochs", 1)),
                num_patches=int(t.get("num_patches", 8)), batch_size=int(t.get("batch_size", 16)),
                intermediate_loss=bool(t.get("intermediate_loss", True)),
                hard_mining=float(t.get("hard_mining", 0.0)),
                hard_mining_order=t.get("hard_mining_order", "loss"),
                hard_mining_maxage=int(t.get("hard_mining_maxage", 3)),
                augment=self._augment("train", ndim),
                balance=BalanceSpec(ratio=float(t.get("balance.ratio", 0.0)),
                                    label_weight=None if lw is None else tuple(lw),
                                    autoweight=bool(t.get("balance.autoweight", False))),
                dontcare=bool(t.get("dontcare", True)),
                learning_rate=float(t.get("learning_rate", 1e-3)),
                beta1=float(t.get("beta1", 0.9)), beta2=float(t.get("beta2", 0.999)),
                eps=float(t.get("eps", 1e-8)), parallel=bool(t.get("parallel", False)))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[train]: {e}") from None

    def infer_config(self, threads: int = 1) -> InferConfig:
        a = self.sections["apply"]
        ndim = int(self.sections["scheme"].get("ndim", 2))
        if "augment" in a:
            if a["augment"] not in ({}, None):
                raise ConfigError("[apply] augment only accepts {} (off); use augment.* keys")
            augment = AugmentParams()
        elif AUGMENT_KEYS & set(a):
            augment = self._augment("apply", ndim)
        else:
            augment = self._augment("train", ndim)  # default: the training setting
        try:
            bf = a.get("branch_factor")
            return InferConfig(
                generate_type=a.get("generate_type", "tree"),
                num_patches=int(a.get("num_patches", 16)),
                branch_factor=None if bf is None else int(bf),
                num_chunks=int(a.get("num_chunks", 1)),
                lazy_fraction=float(a.get("lazyEval.fraction", 1.0)),
                attention_reduce=a.get("lazyEval.reduceFun", "mean"),
                attention_activation=a.get("lazyEval.attentionFun", "sigmoid"),
                window=a.get("window"), sparse_alpha=float(a.get("sparse_suppression", 0.0)),
                augment=augment, out_type=a.get("out_typ", "float32"),
                ce_threshold=float(a.get("ce_threshold", 0.0)),
                sampling_factor=float(a.get("sampling_factor", 1.0)),
                level=a.get("level", -1), jitter=float(a.get("jitter", 0.0)),
                batch_size=int(a.get("batch_size", 64)), threads=threads)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[apply]: {e}") from None
