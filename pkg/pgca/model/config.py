from dataclasses import asdict, dataclass, field, replace

from pgca.core.errors import ConfigError

FUSION_MODES = ("full_pgca", "no_tanh", "sequential", "shared", "addition", "concatenation", "none")
GATED_MODES = ("full_pgca", "no_tanh", "sequential", "shared")
POOLED_MODES = ("addition", "concatenation")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_features: int = 16
    n_heads: int = 2
    d_ff: int = 64
    n_enc: int = 2
    n_dec: int = 2
    # 32 symbols + BOS + EOS
    vocab_tgt: int = 34
    max_source_len: int = 28
    max_target_len: int = 14
    conv_kernel: int = 3
    init_std: float = 0.02
    fusion_mode: str = "none"
    aux_languages: tuple = field(default_factory=tuple)

    @property
    def n_aux(self):
        return len(self.aux_languages)

    @property
    def n_symbols(self):
        return self.vocab_tgt - 2

    @property
    def bos(self):
        return self.vocab_tgt - 2

    @property
    def eos(self):
        return self.vocab_tgt - 1

    @property
    def has_fusion(self):
        return self.fusion_mode != "none"

    @property
    def is_gated(self):
        return self.fusion_mode in GATED_MODES

    def with_fusion(self, fusion_mode, aux_languages):
        return replace(self, fusion_mode=fusion_mode, aux_languages=tuple(aux_languages))

    def validate(self, strict=True):
        problems = []
        if self.fusion_mode not in FUSION_MODES:
            problems.append(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.has_fusion and self.n_aux < 1:
            problems.append(f"fusion_mode {self.fusion_mode!r} needs at least one auxiliary language")
        if len(set(self.aux_languages)) != self.n_aux:
            problems.append(f"duplicate auxiliary languages in {list(self.aux_languages)}")
        if self.n_heads < 1 or self.d % self.n_heads:
            problems.append(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.vocab_tgt < 3:
            problems.append(f"vocab_tgt={self.vocab_tgt} leaves no room for symbols plus BOS/EOS")
        if self.conv_kernel < 1 or self.conv_kernel % 2 != 1:
            problems.append(f"conv_kernel={self.conv_kernel} must be odd and positive")
        for name in ("d", "n_features", "d_ff", "n_enc", "n_dec", "max_source_len", "max_target_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if problems and strict:
            raise ConfigError("Invalid model configuration: " + "; ".join(problems))
        return problems

    def as_dict(self):
        data = asdict(self)
        data["aux_languages"] = list(self.aux_languages)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["aux_languages"] = tuple(data.get("aux_languages", ()))
        return cls(**data)
