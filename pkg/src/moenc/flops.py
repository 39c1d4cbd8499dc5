"""Vision-token grids and LLM prefill/decode FLOPs for multi-encoder pipelines.

The closed forms are used exactly as published.  Read matmul by matmul they
count one FLOP per multiply-add (four projections, two attention matmuls, two
FFN matmuls per layer), although the convention stated next to them says two.
All counts are exact Python integers; rounding to TFLOPs only happens when a
report is rendered.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources

import yaml

from moenc.errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class LlmSpec:
    layers: int = 28
    hidden: int = 3584
    ffn: int = 18944

    def __post_init__(self):
        for key, v in asdict(self).items():
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"LLM spec field {key} must be a positive integer, got {v!r}")


QWEN25_7B = LlmSpec()


@dataclass(frozen=True)
class EncoderTokenSpec:
    name: str
    mode: str
    patch: int | None = None
    merge: int = 1
    stride: int | None = None
    label: str = ""
    external_tflops: float | None = None

    def __post_init__(self):
        if self.mode == "patch_merge":
            ok = self.patch and self.patch > 0 and self.merge > 0
        elif self.mode == "stride":
            ok = self.stride and self.stride > 0
        else:
            raise ConfigurationError(f"encoder {self.name}: unknown mode {self.mode!r}")
        if not ok:
            raise ConfigurationError(f"encoder {self.name}: patch/merge/stride must be positive")

    @property
    def divisor(self) -> int:
        return self.patch * self.merge if self.mode == "patch_merge" else self.stride


@dataclass(frozen=True)
class ScenarioSpec:
    width: int = 1024
    height: int = 768
    prompt_tokens: int = 64
    generation_tokens: int = 256
    encoders: tuple[str, ...] = ("siglip2", "dinov3-vit", "dinov3-convnext", "convllava")
    shared: str | None = "qwen2.5-vit"

    def __post_init__(self):
        for key in ("width", "height", "prompt_tokens", "generation_tokens"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"scenario {key} must be positive")
        if not self.encoders:
            raise ConfigurationError("scenario needs at least one active encoder")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def vision_token_count(spec: EncoderTokenSpec, width: int, height: int) -> int:
    if width < 1 or height < 1:
        raise ContractError(f"image dimensions must be positive, got {width}x{height}")
    d = spec.divisor
    return _ceil_div(width, d) * _ceil_div(height, d)


def prefill_flops(llm: LlmSpec, S0: int) -> int:
    if S0 < 1:
        raise ContractError(f"prefill length must be >= 1, got {S0}")
    L, d, f = llm.layers, llm.hidden, llm.ffn
    return L * (4 * S0 * d * d + 2 * S0 * S0 * d + 2 * S0 * d * f)


def decode_flops(llm: LlmSpec, S0: int, T: int) -> int:
    """KV-cached generation of ``T`` tokens after a prefix of ``S0``."""
    if S0 < 0 or T < 1:
        raise ContractError(f"decode needs S0 >= 0 and T >= 1, got S0={S0}, T={T}")
    L, d, f = llm.layers, llm.hidden, llm.ffn
    return L * (4 * T * d * d + 2 * d * (T * S0 + T * (T - 1) // 2) + 2 * T * d * f)


def load_zoo(path=None) -> tuple[dict[str, EncoderTokenSpec], dict]:
    """Encoder specs keyed by name, plus the raw document (for shared/reference keys)."""
    if path is None:
        text = resources.files("moenc.data").joinpath("encoder_zoo.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = yaml.safe_load(text)
    zoo = {}
    for entry in doc["encoders"]:
        spec = EncoderTokenSpec(**entry)
        zoo[spec.name] = spec
    return zoo, doc


@dataclass
class EncoderRow:
    name: str
    label: str
    vision_tokens: int
    S0: int
    prefill: int
    decode: int


@dataclass
class ConfigRow:
    name: str
    encoders: list[str]
    vision_tokens: int
    S0: int
    prefill: int
    decode: int
    llm_total: int
    encoder_tflops_external: float | None
    llm_saving: float = 0.0
    saving: float = 0.0

    @property
    def total_tflops(self) -> float:
        return self.llm_total / 1e12 + (self.encoder_tflops_external or 0.0)


@dataclass
class ComputeReport:
    scenario: ScenarioSpec
    llm: LlmSpec
    single_encoder: list[EncoderRow]
    configurations: list[ConfigRow]
    notes: list[str] = field(default_factory=list)

    def records(self) -> list[dict]:
        out = [{"kind": "encoder", **asdict(r)} for r in self.single_encoder]
        for r in self.configurations:
            out.append({"kind": "configuration", **asdict(r), "total_tflops": r.total_tflops})
        out.extend({"kind": "note", "text": n} for n in self.notes)
        return out

    def render(self) -> str:
        s = self.scenario
        lines = [
            f"scenario: {s.width}x{s.height}, prompt {s.prompt_tokens}, generate {s.generation_tokens}; "
            f"LLM L={self.llm.layers} d={self.llm.hidden} f={self.llm.ffn}",
            "",
            f"{'encoder':<40} {'tokens':>7} {'S0':>6} {'prefill TF':>11} {'decode TF':>10}",
        ]
        for r in self.single_encoder:
            lines.append(f"{r.label or r.name:<40} {r.vision_tokens:>7} {r.S0:>6} "
                         f"{r.prefill / 1e12:>11.2f} {r.decode / 1e12:>10.2f}")
        lines += ["", f"{'configuration':<28} {'S0':>6} {'prefill':>8} {'decode':>7} {'enc*':>6} "
                      f"{'total':>7} {'saving':>7} {'LLM saving':>10}"]
        for r in self.configurations:
            enc = "-" if r.encoder_tflops_external is None else f"{r.encoder_tflops_external:.2f}"
            lines.append(f"{r.name:<28} {r.S0:>6} {r.prefill / 1e12:>8.2f} {r.decode / 1e12:>7.2f} {enc:>6} "
                         f"{r.total_tflops:>7.2f} {r.saving:>7.2f} {r.llm_saving:>10.2f}")
        lines.append("")
        lines.append("* encoder-side TFLOPs are external inputs from the zoo file, not computed")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def _config_row(name, names, zoo, scenario, llm) -> ConfigRow:
    tokens = sum(vision_token_count(zoo[n], scenario.width, scenario.height) for n in names)
    S0 = tokens + scenario.prompt_tokens
    pre = prefill_flops(llm, S0)
    dec = decode_flops(llm, S0, scenario.generation_tokens)
    ext = [zoo[n].external_tflops for n in names]
    ext_total = None if any(e is None for e in ext) else round(sum(ext), 10)
    return ConfigRow(name, list(names), tokens, S0, pre, dec, pre + dec, ext_total)


def scenario_report(scenario: ScenarioSpec, zoo: dict[str, EncoderTokenSpec],
                    llm: LlmSpec = QWEN25_7B, reference: dict | None = None) -> ComputeReport:
    """Per-encoder prefill table, shared+one configurations, and savings vs the all-encoder set."""
    needed = list(scenario.encoders) + ([scenario.shared] if scenario.shared else [])
    unknown = [n for n in needed if n not in zoo]
    if unknown:
        raise ConfigurationError(f"unknown encoder(s) {unknown}; known specs: {sorted(zoo)}")

    singles = []
    for spec in zoo.values():
        tokens = vision_token_count(spec, scenario.width, scenario.height)
        S0 = tokens + scenario.prompt_tokens
        singles.append(EncoderRow(spec.name, spec.label, tokens, S0, prefill_flops(llm, S0),
                                  decode_flops(llm, S0, scenario.generation_tokens)))

    base = [scenario.shared] if scenario.shared else []
    configs = [_config_row(f"+ {n}", base + [n], zoo, scenario, llm) for n in scenario.encoders]
    full = _config_row("+ all", base + list(scenario.encoders), zoo, scenario, llm)
    configs.append(full)
    for r in configs:
        r.llm_saving = float(1 - Fraction(r.llm_total, full.llm_total))
        r.saving = 1.0 - r.total_tflops / full.total_tflops

    notes = []
    if reference:
        for r in configs:
            key = "all" if r is full else r.encoders[-1]
            ref = reference.get(key)
            if ref and abs(ref["prefill"] - r.prefill / 1e12) > 0.005:
                notes.append(
                    f"{r.name}: closed-form prefill {r.prefill / 1e12:.2f} TFLOPs vs published "
                    f"{ref['prefill']:.2f}; the published value is not reproduced by the formula"
                )
    return ComputeReport(scenario, llm, singles, configs, notes)
