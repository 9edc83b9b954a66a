import pytest

from pano_epipolar.core.errors import ConfigError
from pano_epipolar.utils.class_loader import (
    apply_overrides,
    discover_classes,
    initialize_from_config,
    resolve_interpolations,
)


def test_discover_classes():
    cmap = discover_classes('pano_epipolar')
    assert 'EpipolarMaskBuilder' in cmap
    assert 'SceneForge' in cmap
    assert 'RayProjectionOracle' in cmap


def test_initialize(tmp_path):
    cfg = {
        'masks': {'k': 64},
        'modules': [
            {'class': 'EpipolarMaskBuilder', 'args': {'k': '${masks.k}', 'tau': 1.0}},
            {'class': 'Plotter', 'args': {'output_dir': str(tmp_path / 'plots')}},
        ]
    }
    loaded_config = initialize_from_config(cfg, 'pano_epipolar')
    builder = loaded_config['modules'][0]
    assert builder.__class__.__name__ == 'EpipolarMaskBuilder'
    assert builder.k == 64 and builder.tau == 1.0
    assert (tmp_path / 'plots').is_dir()
    # the input config is left untouched
    assert cfg['modules'][0]['args']['k'] == '${masks.k}'


def test_interpolation_keeps_types():
    cfg = {'a': {'b': [1, 2], 'n': 3}}
    assert resolve_interpolations('${a.b}', cfg) == [1, 2]
    assert resolve_interpolations({'x': '${a.n}'}, cfg) == {'x': 3}
    assert resolve_interpolations('n=${a.n}', cfg) == 'n=3'


def test_bad_config_raises():
    with pytest.raises(ConfigError):
        resolve_interpolations('${a.missing}', {'a': {}})
    with pytest.raises(ConfigError):
        initialize_from_config({'x': {'class': 'NoSuchThing'}}, 'pano_epipolar')
    with pytest.raises(ConfigError):
        initialize_from_config({'x': {'class': 'EpipolarMaskBuilder', 'args': {'bogus': 1}}}, 'pano_epipolar')


def test_apply_overrides():
    cfg = {'mask_builder': {'args': {'k': 250}}}
    out = apply_overrides(cfg, {'mask_builder.args.k': 100, 'mask_builder.args.tau': None, 'oracle.args.workers': 4})
    assert out['mask_builder']['args'] == {'k': 100}
    assert out['oracle']['args']['workers'] == 4
    assert cfg['mask_builder']['args']['k'] == 250
