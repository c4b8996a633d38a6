from rest_framework import serializers

from .backbones import BACKBONE_KINDS
from .losses import EXTRACTOR_KINDS
from .owms import NORMALIZATIONS, PROVIDER_KINDS


class StrictSerializer(serializers.Serializer):
    """Rejects keys it does not declare instead of silently dropping them."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


class RunSectionSerializer(StrictSerializer):
    seed = serializers.IntegerField(min_value=0, default=0, help_text="global seed every RNG stream derives from")
    scale_factor = serializers.IntegerField(min_value=1, default=4, help_text="upscaling factor")
    lr = serializers.FloatField(min_value=0.0, default=5e-5, help_text="learning rate for adapters and selector")
    batch_size = serializers.IntegerField(min_value=1, default=2)
    steps = serializers.IntegerField(min_value=0, default=200)
    crop_size = serializers.IntegerField(min_value=1, default=64, help_text="GT crop side in pixels")
    log_every = serializers.IntegerField(min_value=0, default=10)
    checkpoint_every = serializers.IntegerField(min_value=0, default=0, help_text="0 keeps only the final checkpoint")
    schedule_T = serializers.IntegerField(min_value=1, default=1000)
    beta_start = serializers.FloatField(default=1e-4)
    beta_end = serializers.FloatField(default=0.02)
    fixed_timestep = serializers.IntegerField(min_value=0, max_value=999, required=False, allow_null=True,
                                              default=None, help_text="t* while DTSM is off; largest candidate if unset")
    extractor = serializers.ChoiceField(choices=EXTRACTOR_KINDS, default='toy', help_text="perceptual feature extractor")

    def validate_lr(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be > 0")
        return value


class OptimSectionSerializer(StrictSerializer):
    betas = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=0.999999),
                                  min_length=2, max_length=2, default=[0.9, 0.999])
    eps = serializers.FloatField(min_value=0.0, default=1e-8)
    weight_decay = serializers.FloatField(min_value=0.0, default=0.01)
    grad_clip = serializers.FloatField(min_value=0.0, required=False, allow_null=True, default=None,
                                       help_text="global gradient-norm clip; off when unset")


class DtsmSectionSerializer(StrictSerializer):
    candidates = serializers.ListField(child=serializers.IntegerField(min_value=0, max_value=999),
                                       min_length=1, default=[199, 399, 599, 799, 999])
    temperature = serializers.FloatField(default=1.0)
    temperature_min = serializers.FloatField(required=False, allow_null=True, default=None)
    anneal_steps = serializers.IntegerField(min_value=0, default=0)
    noise = serializers.BooleanField(default=True, help_text="Gumbel noise during training")
    conv_channels = serializers.IntegerField(min_value=1, default=32)
    n_resblocks = serializers.IntegerField(min_value=1, default=4)
    mlp_hidden = serializers.IntegerField(min_value=1, default=128)


class LossSectionSerializer(StrictSerializer):
    lambda1 = serializers.FloatField(min_value=0.0, default=2.0, help_text="MSE weight")
    lambda2 = serializers.FloatField(min_value=0.0, default=5.0, help_text="perceptual distance weight")
    lambda3 = serializers.FloatField(min_value=0.0, default=1.0, help_text="text-domain alignment weight")
    lambda4 = serializers.FloatField(min_value=0.0, default=0.5, help_text="image-domain alignment weight")
    provider = serializers.ChoiceField(choices=PROVIDER_KINDS, default='toy')
    provider_dim = serializers.IntegerField(min_value=1, default=32)
    provider_resolution = serializers.IntegerField(min_value=1, default=32)
    provider_normalization = serializers.ChoiceField(choices=NORMALIZATIONS, default='clip')
    clip_model = serializers.CharField(default='openai/clip-vit-base-patch32')


class AttributesSectionSerializer(StrictSerializer):
    triples = serializers.ListField(
        child=serializers.ListField(child=serializers.CharField(), min_length=3, max_length=3),
        min_length=1,
        required=False,
        help_text="ordered [name, positive prompt, negative prompt] triples replacing the defaults",
    )


class DegradeSectionSerializer(StrictSerializer):
    blur_sigma = serializers.FloatField(min_value=0.0, default=1.0)
    downscale = serializers.IntegerField(min_value=1, default=4)
    noise_sigma = serializers.FloatField(min_value=0.0, default=0.02, help_text="in [0, 1] intensity units")
    jpeg_quality = serializers.IntegerField(min_value=0, max_value=100, default=75,
                                            help_text="0 disables the compression stage")


class BackboneSectionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=BACKBONE_KINDS, default='toy')
    latent_factor = serializers.IntegerField(min_value=1, default=4)
    latent_channels = serializers.IntegerField(min_value=1, default=4)
    hidden_channels = serializers.IntegerField(min_value=1, default=32)
    time_embed_dim = serializers.IntegerField(min_value=2, default=64)
    adapter_rank = serializers.IntegerField(min_value=1, default=16)
    adapter_scaling = serializers.FloatField(default=1.0)


class PathsSectionSerializer(StrictSerializer):
    gt_dir = serializers.CharField(required=False, allow_null=True, default=None)
    data_dir = serializers.CharField(default='data')
    manifest = serializers.CharField(required=False, allow_null=True, default=None)
    out_dir = serializers.CharField(default='runs')
    checkpoint = serializers.CharField(required=False, allow_null=True, default=None)


class VariantSerializer(StrictSerializer):
    name = serializers.CharField()
    dtsm = serializers.BooleanField(default=True)
    id_sal = serializers.BooleanField(default=True)
    td_pal = serializers.BooleanField(default=True)
    exclude = serializers.ListField(child=serializers.CharField(), default=list)
    fixed_timestep = serializers.IntegerField(min_value=0, max_value=999, required=False, allow_null=True,
                                              default=None)


SECTION_SERIALIZERS = {
    'run': RunSectionSerializer,
    'optim': OptimSectionSerializer,
    'dtsm': DtsmSectionSerializer,
    'loss': LossSectionSerializer,
    'attributes': AttributesSectionSerializer,
    'degrade': DegradeSectionSerializer,
    'backbone': BackboneSectionSerializer,
    'paths': PathsSectionSerializer,
}
