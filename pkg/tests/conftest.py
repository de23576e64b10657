import numpy as np
import pytest

from netcarve import GraphBuilder, infer_shapes, validate
from netcarve.train import HrnetLiteSpec, SyntheticDatasetSpec, build_hrnet_lite, generate_dataset


def build_residual_model(seed=0, channels=8, spatial=8, random_bn=True):
    """stem conv-bn-relu -> conv-bn -> add(skip) -> relu -> 1x1 classifier."""
    b = GraphBuilder(input_name="img", rng=np.random.default_rng(seed), random_bn=random_bn)
    stem = b.conv_bn("img", 3, channels, "stem")
    y = b.conv_bn(stem, channels, channels, "blk", relu=False)
    t = b.relu(b.add(y, stem, "add"), "post")
    logits = b.conv(t, channels, 4, "head", k=1, bias=True)
    model = validate(b.finish(logits))
    return infer_shapes(model, (1, 3, spatial, spatial))


@pytest.fixture
def residual_model():
    return build_residual_model()


@pytest.fixture(scope="session")
def hrnet8():
    model = build_hrnet_lite(HrnetLiteSpec(width=8), seed=1)
    return infer_shapes(model, (2, 3, 32, 32))


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticDatasetSpec(image_size=24, train_samples=12, val_samples=4, seed=7)
    return generate_dataset(spec)


def numeric_grad(f, x, eps=1e-4):
    """Central finite differences of scalar f() w.r.t. array x (mutated in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def grad_rel_err(analytic, numeric):
    """Scale-relative max deviation between analytic and FD gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
