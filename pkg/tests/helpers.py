import numpy as np

from iterseg.network import NetworkConfig, build, forward
from iterseg.tensor import (
    Tensor,
    backward,
    concat_channels,
    conv2d,
    conv2d_1x1,
    maxpool2x2,
    relu,
    sigmoid,
    square,
    tensor_sum,
    transposed_conv2d,
)
from oracles import central_difference, relative_error


def gradcheck(loss_fn, arrays, step=1e-3):
    """Compare backward() against central differences for every array.

    ``loss_fn`` takes tensors built from ``arrays`` (float64, all requiring
    grad) and returns a scalar Tensor. Returns the worst relative error.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(loss_fn(*tensors))
    worst = 0.0
    for t in tensors:
        def f():
            return float(loss_fn(*[Tensor(u.data) for u in tensors]).data)

        numeric = central_difference(f, t.data, step)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """sum(out * R) for a fixed random R, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * r).sum()


def passthrough_params(height, width, gain=40.0):
    """Hand-set weights that copy the image straight to the head.

    One channel per layer (stages=1, base=1). The image travels
    img_stem -> enc1 -> skip -> dec1 -> head; every other weight is zero.
    The head computes sigmoid(gain * (x - 0.5)), so thresholding at 0.5
    reproduces ``image > 0.5`` exactly.
    """
    params = build(NetworkConfig(height, width, stages=1, base_channels=1, merge_points=(1,)), dtype=np.float64)
    for layer in params.layers.values():
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    L = params.layers
    L["img_stem"].weight.data[0, 0, 1, 1] = 1.0
    L["enc1.conv1"].weight.data[0, 0, 1, 1] = 1.0  # channel 0 is the image path
    L["enc1.conv2"].weight.data[0, 0, 1, 1] = 1.0
    L["dec1.conv1"].weight.data[0, 1, 1, 1] = 1.0  # skip comes after the upsampled channel
    L["dec1.conv2"].weight.data[0, 0, 1, 1] = 1.0
    L["head"].weight.data[0, 0, 0, 0] = gain
    L["head"].bias.data[0] = -0.5 * gain
    return params


# --- shared gradient-check cases ---------------------------------------------

GRAD_CASES = {
    "conv2d": (lambda x, w, b: weighted_sum(conv2d(x, w, b)), [(2, 2, 5, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_stride2": (lambda x, w: weighted_sum(conv2d(x, w, stride=2)), [(1, 2, 6, 4), (2, 2, 3, 3)]),
    "conv2d_1x1": (lambda x, w, b: weighted_sum(conv2d_1x1(x, w, b)), [(2, 3, 4, 4), (2, 3, 1, 1), (2,)]),
    "transposed_conv2d": (lambda x, w, b: weighted_sum(transposed_conv2d(x, w, b)), [(2, 3, 3, 4), (3, 2, 3, 3), (2,)]),
    "maxpool2x2": (lambda x: weighted_sum(maxpool2x2(x)[0]), [(2, 2, 4, 6)]),
    "concat_channels": (lambda a, b: weighted_sum(concat_channels(a, b)), [(1, 2, 3, 3), (1, 1, 3, 3)]),
    "sigmoid": (lambda x: weighted_sum(sigmoid(x)), [(3, 4)]),
    "relu": (lambda x: weighted_sum(relu(x)), [(3, 4)]),
    "square_sum": (lambda x: tensor_sum(square(x)), [(5,)]),
    "axis_sum": (lambda x: weighted_sum(tensor_sum(x, (1, 2))), [(3, 2, 4)]),
    "mul_div_sub": (lambda a, b: weighted_sum((a * b - a) / (square(b) + 1.0)), [(4, 3), (4, 3)]),
}


def grad_case_arrays(name, seed=7):
    """Random float64 inputs for ``GRAD_CASES[name]``, kept clear of kinks and ties."""
    shapes = GRAD_CASES[name][1]
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if name == "relu":
        arrays[0][np.abs(arrays[0]) < 0.05] = 0.5
    if name == "maxpool2x2":
        # distinct values 0.1 apart: no window is near a tie
        arrays[0] = rng.permutation(np.arange(arrays[0].size, dtype=float)).reshape(shapes[0]) * 0.1
    return arrays


def tiny_loss(params, img, interim, r):
    def loss(*tensors):
        local = params.copy()
        for (name, _), t in zip(local.named_tensors(), tensors):
            layer, kind = name.rsplit(".", 1)
            setattr(local.layers[layer], kind, t)
        return (forward(local, img, interim) * r).sum()

    return loss


def smooth_tiny_point(seed):
    """A parameter point where the loss is smooth within +-1e-3 of every weight.

    Non-negative filters with positive biases keep every ReLU active on
    positive inputs, unit-sum filters keep activations O(1), and the head
    is calibrated so the sigmoid sits in its responsive range.
    """
    cfg = NetworkConfig(8, 8, stages=1, base_channels=2, merge_points=(1,))
    params = build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, layer in params.layers.items():
        if name != "head":
            w = np.abs(layer.weight.data)
            layer.weight.data[...] = 1.2 * w / w.sum(axis=(1, 2, 3), keepdims=True)
            layer.bias.data[...] = 0.1
    img = rng.uniform(0, 1, (2, 1, 8, 8))
    interim = rng.uniform(0, 1, (2, 1, 8, 8))
    head = params.layers["head"]
    head.weight.data[...], head.bias.data[...] = 1e-3, 0.0
    z = forward(params, img, interim).data
    logit = np.log(z / (1 - z)) / 1e-3
    head.weight.data[...] = 1.0 / logit.std()
    head.bias.data[...] = -logit.mean() / logit.std()
    return params, img, interim, rng.standard_normal((2, 1, 8, 8))
