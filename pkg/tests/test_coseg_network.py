import numpy as np
import pytest

from modules.autograd_ops import AutogradError, NetworkShapeError, add, pixel_cross_entropy, softmax_channels
from modules.coseg_network import AttentionKind, CosegNetwork, NetworkConfig, ParamStore, infer, stack_images
from modules.image_grid import SeededRng

TINY = (2, 3, 3, 4)


def _network(attention='channel', single_branch=False, encoder='drn-s'):
    return CosegNetwork(NetworkConfig(encoder=encoder, widths=TINY, attention=attention,
                                      single_branch=single_branch))


def _randomized(network, seed=0, scale=0.3):
    """Parameters with every entry random, so no gate sits at its zero initialization."""
    gen = np.random.default_rng(seed)
    return ParamStore({name: gen.normal(0.0, scale, size=shape)
                       for name, (shape, _) in network.parameter_specs().items()})


def _images(seed, n=1, size=16):
    return np.random.default_rng(seed).uniform(size=(n, 1, size, size))


def _targets(seed, n=1, size=16):
    return np.random.default_rng(seed).integers(0, 2, size=(n, size, size))


class TestParamStore:
    def test_initialize(self):
        specs = {'w': ((400, 25), 'he'), 'b': ((400,), 'zeros')}
        store = ParamStore.initialize(specs, SeededRng(1))
        assert store.names() == ['w', 'b']
        assert np.all(store['b'].data == 0)
        assert store['w'].data.std() == pytest.approx(np.sqrt(2.0 / 25), rel=0.05)
        assert store['w'].requires_grad

    def test_initialize_is_seeded(self):
        specs = {'w': ((3, 2, 3, 3), 'he')}
        a = ParamStore.initialize(specs, SeededRng(5))
        b = ParamStore.initialize(specs, SeededRng(5))
        assert np.array_equal(a['w'].data, b['w'].data)

    def test_unknown_initializer(self):
        with pytest.raises(ValueError, match='Unsupported initializer'):
            ParamStore.initialize({'w': ((2,), 'xavier')}, SeededRng(0))

    def test_duplicate_name(self):
        store = ParamStore({'w': np.zeros(2)})
        with pytest.raises(ValueError, match='duplicate parameter name: w'):
            store.add('w', np.ones(2))

    def test_set_value_checks_shape(self):
        store = ParamStore({'w': np.zeros((2, 3))})
        store.set_value('w', np.ones((2, 3)))
        assert np.all(store['w'].data == 1)
        with pytest.raises(NetworkShapeError, match='expected shape'):
            store.set_value('w', np.ones(6))

    def test_copy_is_independent(self):
        store = ParamStore({'w': np.zeros(3)})
        clone = store.copy()
        clone.set_value('w', np.ones(3))
        assert np.all(store['w'].data == 0)
        assert len(clone) == 1 and 'w' in clone

    def test_gradients_before_backward(self):
        with pytest.raises(AutogradError, match='no gradients recorded'):
            ParamStore({'w': np.zeros(3)}).gradients()


class TestParameterSpecs:
    def test_attention_parameters_follow_kind(self):
        assert not any(n.startswith('attention.') for n in _network('none').parameter_specs())
        channel = _network('channel').parameter_specs()
        assert 'attention.fc1.w' in channel and 'attention.spatial.w' not in channel
        both = _network('channel_spatial').parameter_specs()
        assert both['attention.spatial.w'] == ((1, 2, 7, 7), 'zeros')

    def test_gate_output_layer_starts_at_zero(self):
        specs = _network('channel').parameter_specs()
        assert specs['attention.fc1.w'] == ((1, 4), 'he')
        assert specs['attention.fc2.w'] == ((4, 1), 'zeros')

    def test_single_branch_has_no_attention(self):
        network = _network('channel_spatial', single_branch=True)
        assert network.attention == AttentionKind.NONE
        assert not any(n.startswith('attention.') for n in network.parameter_specs())

    def test_config_coerces_strings(self):
        config = NetworkConfig(attention='channel_spatial', widths=[2, 3, 3, 4])
        assert config.attention is AttentionKind.CHANNEL_SPATIAL
        assert config.widths == TINY


class TestForward:
    def test_logit_shapes(self):
        network = _network()
        params = network.init_params(SeededRng(0))
        logits_a, logits_b = network.forward_siamese(_images(1, n=2), _images(2, n=2), params)
        assert logits_a.shape == logits_b.shape == (2, 2, 16, 16)

    def test_accepts_plain_2d_images(self):
        network = _network()
        params = network.init_params(SeededRng(0))
        prob_a, prob_b = infer(network, params, _images(1)[0, 0], _images(2)[0, 0])
        assert prob_a.shape == prob_b.shape == (1, 16, 16)

    def test_mismatched_pair(self):
        network = _network()
        params = network.init_params(SeededRng(0))
        with pytest.raises(NetworkShapeError, match='input shapes'):
            network.forward_siamese(_images(1, size=16), _images(2, size=24), params)

    @pytest.mark.parametrize('attention', ['none', 'channel', 'channel_spatial'])
    def test_swapping_inputs_swaps_outputs(self, attention):
        network = _network(attention)
        params = _randomized(network)
        a, b = _images(1), _images(2)
        ab_a, ab_b = network.forward_siamese(a, b, params)
        ba_a, ba_b = network.forward_siamese(b, a, params)
        assert np.array_equal(ab_a.data, ba_b.data)
        assert np.array_equal(ab_b.data, ba_a.data)

    def test_fresh_gate_is_one_half(self):
        network = _network('channel')
        params = network.init_params(SeededRng(0))
        f_a = network.encode(_images(1), params)
        f_b = network.encode(_images(2), params)
        gate_a, gate_b = network.channel_attention(f_a, f_b, params)
        assert gate_a.shape == (1, 4, 1, 1)
        assert np.all(gate_a.data == 0.5) and gate_a is gate_b

    def test_fresh_gate_ignores_partner(self):
        network = _network('channel')
        params = network.init_params(SeededRng(0))
        a = _images(1)
        first, _ = network.forward_siamese(a, _images(2), params)
        second, _ = network.forward_siamese(a, _images(3), params)
        assert np.array_equal(first.data, second.data)

    def test_trained_gate_depends_on_partner(self):
        network = _network('channel')
        params = _randomized(network)
        # keep the hidden unit active so the gate sees the partner
        params.set_value('attention.fc1.w', np.abs(params['attention.fc1.w'].data) + 0.1)
        params.set_value('attention.fc1.b', np.full(1, 0.1))
        a = _images(1)
        first, _ = network.forward_siamese(a, _images(2), params)
        second, _ = network.forward_siamese(a, _images(3), params)
        assert not np.array_equal(first.data, second.data)

    def test_fresh_spatial_map_is_one_half(self):
        network = _network('channel_spatial')
        params = network.init_params(SeededRng(0))
        spatial = network.spatial_attention(network.encode(_images(1), params), params)
        assert spatial.shape == (1, 1, 2, 2)
        assert np.all(spatial.data == 0.5)

    def test_channel_attention_shape_mismatch(self):
        network = _network('channel')
        params = network.init_params(SeededRng(0))
        f_a = network.encode(_images(1), params)
        f_b = network.encode(_images(2, n=2), params)
        with pytest.raises(NetworkShapeError, match='feature shapes'):
            network.channel_attention(f_a, f_b, params)


class TestInference:
    def test_probabilities_are_a_softmax_channel(self):
        network = _network('channel_spatial')
        params = _randomized(network)
        logits_a, _ = network.forward_siamese(_images(1), _images(2), params)
        probs = softmax_channels(logits_a).data
        assert np.allclose(probs.sum(axis=1), 1.0)
        prob_a, _ = infer(network, params, _images(1), _images(2))
        assert np.allclose(prob_a, probs[:, 1])
        assert np.all((prob_a >= 0) & (prob_a <= 1))

    def test_single_branch_needs_no_partner(self):
        network = _network(single_branch=True)
        params = network.init_params(SeededRng(0))
        prob, partner = infer(network, params, _images(1))
        assert partner is None and prob.shape == (1, 16, 16)

    def test_siamese_needs_partner(self):
        network = _network()
        with pytest.raises(ValueError, match='partner image'):
            infer(network, network.init_params(SeededRng(0)), _images(1))

    def test_stack_images(self):
        batch = stack_images([np.zeros((4, 4)), np.ones((4, 4))])
        assert batch.shape == (2, 1, 4, 4) and batch.dtype == np.float64


def _pair_loss(network, params, a, b, target_a, target_b):
    logits_a, logits_b = network.forward_siamese(a, b, params)
    return add(pixel_cross_entropy(logits_a, target_a), pixel_cross_entropy(logits_b, target_b))


@pytest.mark.parametrize('attention, encoder', [
    ('channel', 'drn-s'), ('channel_spatial', 'drn-s'), ('channel', 'resnet-s'), ('none', 'vgg-s'),
])
def test_directional_derivative_matches_backward(attention, encoder):
    network = _network(attention, encoder=encoder)
    size = 32 if encoder != 'drn-s' else 16
    params = _randomized(network, seed=4)
    data = (_images(1, size=size), _images(2, size=size), _targets(3, size=size), _targets(4, size=size))

    _pair_loss(network, params, *data).backward()
    grads = params.gradients()

    gen = np.random.default_rng(9)
    direction = {name: gen.normal(size=params[name].shape) for name in params}
    analytic = sum(float(np.sum(grads[name] * direction[name])) for name in params)

    eps = 1e-6
    values = []
    for sign in (1.0, -1.0):
        shifted = ParamStore({name: params[name].data + sign * eps * direction[name] for name in params})
        values.append(float(_pair_loss(network, shifted, *data).data))
    numeric = (values[0] - values[1]) / (2 * eps)
    assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_unused_parameters_get_zero_gradient():
    network = _network('channel')
    params = network.init_params(SeededRng(0))
    logits = network.forward_single(_images(1), params)
    pixel_cross_entropy(logits, _targets(2)).backward()
    grads = params.gradients()
    assert np.all(grads['attention.fc1.w'] == 0)
    assert np.any(grads['decoder.head.w'] != 0)
