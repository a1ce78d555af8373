import json

import numpy as np
import pytest
from scipy import stats

from pmmsynth.datamodel import (
    MODALITY_NAMES,
    IntensityProfile,
    Modality,
    ModalityMask,
    iter_slice_dirs,
    load_corpus,
)
from pmmsynth.errors import ConfigError, PMMSynthError
from pmmsynth.phantom import (
    MANIFEST_FILENAME,
    MODALITY_EXPONENT,
    LatentAnatomy,
    PhantomSpec,
    directory_digest,
    draw_availability,
    generate_phantom_corpus,
    make_anatomy,
    render_modality,
)
from pmmsynth.seeding import rng_stream

from conftest import TINY_SPEC


def _plain_anatomy(seed=0, size=24):
    a = make_anatomy(size, np.random.default_rng(seed))
    return LatentAnatomy(a.base)


@pytest.mark.parametrize("mod", list(Modality))
def test_identity_profile_renders_base_power(mod):
    a = _plain_anatomy()
    img = render_modality(a, mod, IntensityProfile(1.0, 1.0, 0.0, 0.0))
    expected = np.power(a.base, MODALITY_EXPONENT[mod]).astype(np.float32)
    np.testing.assert_array_equal(img, expected)


def test_gain_ratio_on_constant_base():
    # closed form: mean = gain * c**(gamma*g) + bias; noise has zero mean
    c = 0.6
    a = LatentAnatomy(np.full((64, 64), c))
    lo = IntensityProfile(1.0, 0.8, 0.0, 0.01)
    hi = IntensityProfile(1.0, 1.2, 0.0, 0.01)
    for mod in Modality:
        m_lo = render_modality(a, mod, lo, np.random.default_rng(1)).mean()
        m_hi = render_modality(a, mod, hi, np.random.default_rng(2)).mean()
        expect_lo = 0.8 * c ** MODALITY_EXPONENT[mod]
        assert m_lo == pytest.approx(expect_lo, rel=0.01)
        assert m_hi / m_lo == pytest.approx(1.5, rel=0.05)


def test_render_is_deterministic():
    a = make_anatomy(32, rng_stream(3, "anatomy"))
    b = make_anatomy(32, rng_stream(3, "anatomy"))
    p = IntensityProfile(1.3, 0.8, 0.1, 0.05)
    x = render_modality(a, "T1C", p, rng_stream(3, "noise"))
    y = render_modality(b, "T1C", p, rng_stream(3, "noise"))
    assert x.tobytes() == y.tobytes()


def test_lesion_contrast_in_t1c():
    rng = np.random.default_rng(0)
    while True:
        a = make_anatomy(32, rng)
        if a.lesions:
            break
    plain = LatentAnatomy(a.base, (), a.fluid)
    p = IntensityProfile()
    diff = render_modality(a, "T1C", p) - render_modality(plain, "T1C", p)
    inside = a.lesion_mask() > 0.5
    assert diff[inside].mean() > 0.2


def test_corpus_counts(tmp_path):
    doc = json.loads(json.dumps(TINY_SPEC))
    for d in doc["datasets"]:
        d["missingness_rate"] = 0.0
    spec = PhantomSpec.from_dict(doc)
    generate_phantom_corpus(spec, tmp_path / "c")
    reg, samples = load_corpus(tmp_path / "c")
    assert len(iter_slice_dirs(tmp_path / "c", reg)) == 24
    for s in samples:
        assert s.availability == reg.by_id(s.dataset_id).coverage


def test_drop_fraction_matches_rate():
    # 400 cases x 6 modalities = 2400 Bernoulli draws of the final decisions
    cov = ModalityMask.full()
    dropped = 0
    for c in range(400):
        mask, _ = draw_availability(cov, 0.5, rng_stream(9, "drops", c))
        dropped += 6 - mask.count
        assert mask.count >= 2
    assert abs(dropped / 2400 - 0.5) <= 0.1


def test_corpus_drop_fraction_and_manifest(tmp_path):
    doc = {
        "global_seed": 1,
        "datasets": [
            {"name": "d", "coverage": list(MODALITY_NAMES), "case_count": 50, "slices_per_case": 1,
             "image_size": 8, "missingness_rate": 0.5}
        ],
    }
    manifest = generate_phantom_corpus(PhantomSpec.from_dict(doc), tmp_path)
    drops = sum(len(c["dropped"]) for c in manifest["cases"])
    assert abs(drops / 300 - 0.5) <= 0.1
    assert all(sum(c["availability"]) >= 2 for c in manifest["cases"])
    on_disk = json.loads((tmp_path / MANIFEST_FILENAME).read_text())
    assert on_disk["global_seed"] == 1
    assert on_disk["spec"]["datasets"][0]["missingness_rate"] == 0.5


def test_regeneration_is_byte_identical(tmp_path, tiny_spec):
    generate_phantom_corpus(tiny_spec, tmp_path / "a")
    generate_phantom_corpus(tiny_spec, tmp_path / "b")
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")


def test_refuses_nonempty_destination(tmp_path, tiny_spec):
    generate_phantom_corpus(tiny_spec, tmp_path)
    with pytest.raises(PMMSynthError):
        generate_phantom_corpus(tiny_spec, tmp_path)
    generate_phantom_corpus(tiny_spec, tmp_path, overwrite=True)


def test_unwritable_destination(tmp_path, tiny_spec):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PMMSynthError):
        generate_phantom_corpus(tiny_spec, blocker / "sub")


def test_cross_dataset_shift_is_visible(tiny_corpus):
    reg, samples = load_corpus(tiny_corpus)
    t1 = {0: [], 1: []}
    for s in samples:
        if s.availability[Modality.T1]:
            t1[s.dataset_id].append(s.images[Modality.T1].ravel())
    ks = stats.ks_2samp(np.concatenate(t1[0]), np.concatenate(t1[1])).statistic
    assert ks > 0.2


def test_lesion_geometry_recorded(tiny_corpus):
    manifest = json.loads((tiny_corpus / MANIFEST_FILENAME).read_text())
    for case in manifest["cases"]:
        for sl in case["slices"]:
            assert sl["fluid"] is not None
            for les in sl["lesions"]:
                assert len(les["center"]) == 2 and len(les["radii"]) == 2


def test_malformed_spec_names_field():
    doc = json.loads(json.dumps(TINY_SPEC))
    doc["datasets"][1]["intensity_profile"]["gamma"] = -1
    with pytest.raises(ConfigError) as exc:
        PhantomSpec.from_dict(doc)
    assert exc.value.field == "datasets[1]"
    doc = json.loads(json.dumps(TINY_SPEC))
    doc["datasets"][0]["case_count"] = 0
    with pytest.raises(ConfigError) as exc:
        PhantomSpec.from_dict(doc)
    assert exc.value.field == "datasets[0].case_count"
