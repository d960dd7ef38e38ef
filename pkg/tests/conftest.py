import numpy as np
import pytest

from gags.config import CameraRing, ObjectNode, SceneSpec
from gags.field import Camera, GaussianField


def _random_field(rng, n, d=4, spread=0.5, depth=(2.5, 4.0), scale=(0.05, 0.15)):
    q = rng.normal(size=(n, 4))
    return GaussianField.create(
        positions=np.column_stack([
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(depth[0], depth[1], n),
        ]),
        scales=rng.uniform(scale[0], scale[1], size=(n, 3)),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacities=rng.uniform(0.3, 0.9, n),
        features=rng.normal(size=(n, d)),
    )


@pytest.fixture
def make_field():
    """Factory for random fields in front of the `camera` fixture."""
    return _random_field


@pytest.fixture
def camera():
    # identity pose: world == camera frame, looking down +z
    return Camera(width=16, height=16, fx=20.0, fy=20.0, cx=8.0, cy=8.0)


@pytest.fixture
def small_field():
    return _random_field(np.random.default_rng(0), 10)


@pytest.fixture
def tiny_scene():
    """One object with two parts (one split into sub-parts), two 32x32 views."""
    base_lower = ObjectNode(label="cup base lower", shape="box", center=[0, 0, -0.1], extent=[0.3, 0.3, 0.1])
    base_upper = ObjectNode(label="cup base upper", shape="box", center=[0, 0, 0.1], extent=[0.3, 0.3, 0.1])
    base = ObjectNode(label="cup base", shape="box", center=[0, 0, 0], extent=[0.3, 0.3, 0.2],
                      children=[base_lower, base_upper])
    top = ObjectNode(label="cup top", shape="sphere", center=[0, 0, 0.4], extent=[0.2])
    cup = ObjectNode(label="cup", shape="box", center=[0, 0, 0.1], extent=[0.3, 0.3, 0.5], children=[base, top])
    return SceneSpec(
        objects=[cup],
        cameras=CameraRing(count=2, radii=[2.5, 3.5], height=1.0, image_width=32, image_height=32),
        gaussians_per_unit_area=150.0,
        feature_dim=4,
        codebook_dim=8,
    )
