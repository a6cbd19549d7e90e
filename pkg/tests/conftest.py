import numpy as np
import pytest

from confloc import ArrayLayout, MicNode, Roi, RoomSpec, Scene
from confloc.features import AggregatedRtf


def latent_instance(rng, n, n_nodes=2, n_bins=3):
    """Features smoothly parameterized by a latent scalar, plus that scalar.

    Gives GP regression an actual signal to learn, unlike i.i.d. features.
    """
    z = rng.uniform(-1.0, 1.0, n)
    feats = []
    for zi in z:
        nodes = tuple(
            np.exp(1j * (k + 1) * zi * np.arange(1, n_bins + 1)) * (1 + 0.1 * k)
            for k in range(n_nodes)
        )
        feats.append(AggregatedRtf(nodes))
    return feats, z


def make_layout(n_nodes=1):
    """Small wall-hugging layouts inside the 5.2 x 6.2 x 3.5 m room."""
    all_nodes = [
        MicNode([1.7, 0.3, 1.5], [1.9, 0.3, 1.5]),
        MicNode([3.3, 0.3, 1.5], [3.5, 0.3, 1.5]),
        MicNode([1.7, 5.9, 1.5], [1.9, 5.9, 1.5]),
        MicNode([3.3, 5.9, 1.5], [3.5, 5.9, 1.5]),
        MicNode([0.3, 3.0, 1.5], [0.3, 3.2, 1.5]),
    ]
    return ArrayLayout(all_nodes[:n_nodes])


def make_scene(t60=0.0, snr_db=np.inf, n_nodes=1, source=(2.6, 3.1), seed=0):
    room = RoomSpec([5.2, 6.2, 3.5], t60=t60)
    roi = Roi((1.6, 3.6), (2.1, 4.1))
    return Scene(
        room=room,
        array=make_layout(n_nodes),
        source_pos=np.asarray(source, dtype=float),
        roi=roi,
        snr_db=snr_db,
        seed=seed,
    )


@pytest.fixture
def anechoic_scene():
    return make_scene()
