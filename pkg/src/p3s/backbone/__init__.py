from .base import (
    BackboneBundle,
    DenoiserTaps,
    DiffusionSchedule,
    LatentImage,
    PatchEncoding,
    TextEncoding,
    array_content_hash,
    load_asset_manifest,
    module_content_hash,
    to_float_image,
)
from .toy import ToyBackboneConfig, build_toy_backbone

BACKBONE_BUILDERS = {"toy": build_toy_backbone}


def build_backbone(name: str, config=None, identifier: str = "sks") -> BackboneBundle:
    """Look up a registered backbone builder by name.

    Only the toy backbone ships with the package; adapters for real
    latent-diffusion stacks register themselves here and resolve their
    weights through an asset manifest.
    """
    try:
        builder = BACKBONE_BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown backbone '{name}'; registered: {sorted(BACKBONE_BUILDERS)}") from None
    return builder(config, identifier=identifier)
