import numpy as np
import pytest

from modules.autograd_ops import NetworkShapeError, Tensor
from modules.coseg_network import ParamStore
from modules.encoder_factory import DilatedResNetEncoder, EncoderFactory, ResNetEncoder, VggEncoder
from modules.image_grid import SeededRng

TINY = (2, 3, 3, 4)


def _encode(encoder, size, seed=0):
    params = ParamStore.initialize(encoder.parameter_specs(), SeededRng(seed))
    x = Tensor(np.random.default_rng(seed).uniform(size=(2, 1, size, size)))
    return encoder.forward(x, params)


def test_factory_variants():
    factory = EncoderFactory()
    assert factory.get_supported_variants() == ['vgg-s', 'resnet-s', 'drn-s']
    assert isinstance(factory.create_encoder('vgg-s', TINY), VggEncoder)
    assert isinstance(factory.create_encoder('drn-s', TINY), DilatedResNetEncoder)


def test_factory_rejects_unknown_variant():
    with pytest.raises(ValueError, match='Unsupported encoder variant: unet'):
        EncoderFactory().create_encoder('unet')


@pytest.mark.parametrize('variant, stride', [('vgg-s', 8), ('resnet-s', 4), ('drn-s', 16)])
def test_factory_rejects_output_stride(variant, stride):
    with pytest.raises(ValueError, match='Unsupported output stride'):
        EncoderFactory().create_encoder(variant, TINY, output_stride=stride)


def test_widths_must_have_four_positive_entries():
    with pytest.raises(ValueError):
        VggEncoder((2, 3, 4))
    with pytest.raises(ValueError):
        ResNetEncoder((2, 0, 3, 4))


@pytest.mark.parametrize('variant, stride, expected', [
    ('vgg-s', None, 16), ('vgg-s', 32, 32), ('resnet-s', None, 16), ('resnet-s', 32, 32), ('drn-s', None, 8),
])
def test_output_stride(variant, stride, expected):
    assert EncoderFactory().create_encoder(variant, TINY, output_stride=stride).output_stride == expected


@pytest.mark.parametrize('variant, stride, size', [
    ('vgg-s', 16, 32), ('vgg-s', 32, 32), ('resnet-s', 16, 32), ('resnet-s', 32, 64), ('drn-s', 8, 32),
])
def test_forward_shape(variant, stride, size):
    encoder = EncoderFactory().create_encoder(variant, TINY, output_stride=stride)
    out = _encode(encoder, size)
    assert out.shape == (2, 4, size // stride, size // stride)


def test_drn_keeps_eighth_resolution_at_working_size():
    encoder = EncoderFactory().create_encoder('drn-s', TINY)
    assert encoder.dilations == (1, 1, 2, 4)
    assert _encode(encoder, 128).shape[2:] == (16, 16)


def test_forward_rejects_size_not_multiple_of_stride():
    encoder = EncoderFactory().create_encoder('drn-s', TINY)
    with pytest.raises(NetworkShapeError, match='not a multiple of output stride 8'):
        _encode(encoder, 20)


def test_projection_shortcuts_only_where_shape_changes():
    resnet = ResNetEncoder(TINY).parameter_specs()
    drn = DilatedResNetEncoder(TINY).parameter_specs()
    # stage2 keeps width 3 and only strides in the plain residual encoder
    assert 'encoder.stage2.proj.w' in resnet
    assert 'encoder.stage2.proj.w' not in drn
    assert 'encoder.stage3.proj.w' in drn
    assert drn['encoder.stage3.proj.w'][0] == (4, 3, 1, 1)


def test_vgg_has_no_residual_parameters():
    specs = VggEncoder(TINY).parameter_specs()
    assert len(specs) == 10
    assert not any('proj' in name for name in specs)
    assert specs['encoder.stem.w'] == ((2, 1, 3, 3), 'he')
    assert specs['encoder.stem.b'] == ((2,), 'zeros')


def test_forward_is_deterministic():
    encoder = EncoderFactory().create_encoder('resnet-s', TINY)
    assert np.array_equal(_encode(encoder, 32, seed=3).data, _encode(encoder, 32, seed=3).data)
