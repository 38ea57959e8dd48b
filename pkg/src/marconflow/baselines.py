"""Ablation variants expressed as flags on the one model."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .model import ModelConfig, MosesModel


@dataclass(frozen=True)
class VariantSpec:
    disable_flows: bool = False
    identity_covariance: bool = False
    uniform_weights: bool = False
    single_component: bool = False


VARIANTS = {
    "moses": VariantSpec(),
    "gmm": VariantSpec(disable_flows=True),
    "no-cov": VariantSpec(identity_covariance=True),
    "no-weights": VariantSpec(uniform_weights=True),
    "single": VariantSpec(single_component=True),
}


def variant_config(base: ModelConfig, spec: VariantSpec) -> ModelConfig:
    """Flags only ever switch features off, so they compose in any order."""
    return replace(
        base,
        disable_flows=base.disable_flows or spec.disable_flows,
        identity_covariance=base.identity_covariance or spec.identity_covariance,
        uniform_weights=base.uniform_weights or spec.uniform_weights,
        components=1 if spec.single_component else base.components,
    )


def build_variant(base: ModelConfig, spec: VariantSpec | str, seed: int = 0) -> MosesModel:
    if isinstance(spec, str):
        try:
            spec = VARIANTS[spec]
        except KeyError:
            raise ValueError(f"unknown variant {spec!r}; choose from {sorted(VARIANTS)}") from None
    return MosesModel(variant_config(base, spec), seed=seed)
