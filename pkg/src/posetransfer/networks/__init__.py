from .modules import (
    Discriminator, GeneratorG1, GeneratorG2, SkipFuse, build_network, init_weights, merge,
)
from .specs import (
    BOTTLENECK_DIMS, DEFAULT_IMAGE_SIZE, PROFILES, LayerSpec, NetworkSpec, SpecError, all_specs,
    discriminator_spec, g1_decoder_spec, g1_encoder_spec, g2_decoder_spec, g2_encoder_spec,
    verify_spec, with_layer,
)
