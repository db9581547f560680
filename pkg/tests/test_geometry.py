import pytest

from mblflow.entities import Block, BlockSet, FlowParams
from mblflow.errors import BlockInvariantError
from mblflow.geometry import (
    build_blocks_step1,
    collar_width,
    contracted_distance,
    estimate_connectivity,
    expand,
    make_block,
    outer_collar_width,
    resonant_site_frequency,
    same_group_matrix,
    separation_distance,
    set_distance,
    step1_bound,
    update_blocks,
    validate_block_set,
    volume_class,
)


@pytest.fixture(scope="function")
def flow_params() -> FlowParams:
    return FlowParams(gamma=0.02)


def test_separation_distance_is_clamped_to_chain_length():
    assert separation_distance(1, 100) == pytest.approx(3.9326, abs=1e-3)
    assert separation_distance(1, 3) == 3.0
    assert separation_distance(0, 100, m0=1) == separation_distance(1, 100)


@pytest.mark.parametrize(
    "volume, expected",
    [(0.5, 1), (1.0, 1), (1.875, 2), (2.0, 2), (3.6, 3)],
)
def test_volume_class(volume, expected):
    assert volume_class(volume) == expected


def test_collar_widths():
    assert collar_width(1) == 1
    assert collar_width(2) == 3
    assert outer_collar_width(1) == 2
    assert outer_collar_width(2) == 3


def test_expand_and_set_distance():
    assert expand([3], 1, 5) == (2, 3, 4)
    assert expand([0, 4], 2, 5) == (0, 1, 2, 3, 4)
    assert set_distance([0, 1], [4]) == 3


def test_make_block_nests_collars():
    block = make_block([10], 1, 20)

    assert block.sites == (10,)
    assert block.collar == (9, 10, 11)
    assert block.outer_collar == tuple(range(7, 14))
    assert block.volume == 1.0


def test_step1_isolated_sites_become_small_blocks():
    block_set = build_blocks_step1({2, 10}, 20)

    assert [b.sites for b in block_set.small_blocks] == [(2,), (10,)]
    assert block_set.small_blocks[0].collar == (1, 2, 3)
    assert block_set.large_region == frozenset()
    assert block_set.components == (frozenset({2}), frozenset({10}))
    assert block_set.resonant_sites == frozenset({2, 10})


def test_step1_nearby_sites_join_the_large_region():
    block_set = build_blocks_step1({2, 4}, 20)

    assert block_set.small_blocks == ()
    assert block_set.large_region == frozenset({2, 4})
    assert block_set.large_collar == frozenset({1, 2, 3, 4, 5})


@pytest.mark.parametrize(
    "sites, small",
    [({2, 3}, True), ({2, 3, 4}, False)],
)
def test_step1_block_diameter_must_stay_below_first_length_scale(sites, small):
    block_set = build_blocks_step1(sites, 20)

    assert bool(block_set.small_blocks) is small
    assert bool(block_set.large_region) is not small


def test_step1_rejects_sites_outside_chain():
    with pytest.raises(IndexError, match="resonant site 6"):
        build_blocks_step1({6}, 6)


def test_update_blocks_keeps_distant_blocks_apart(flow_params):
    previous = build_blocks_step1({2}, 20)

    block_set = update_blocks(previous, [(10, 11)], 2, flow_params)

    assert block_set.scale == 2
    assert [(b.sites, b.scale) for b in block_set.small_blocks] == [
        ((2,), 1),
        ((10, 11), 2),
    ]
    new_block = block_set.small_blocks[1]
    assert new_block.collar == tuple(range(7, 15))
    assert new_block.outer_collar == tuple(range(4, 18))
    assert new_block.volume == 2.0
    assert block_set.components == (frozenset({10, 11}),)
    assert block_set.resonant_sites == frozenset({2, 10, 11})


def test_update_blocks_merges_conflicting_units(flow_params):
    previous = build_blocks_step1({2}, 20)

    block_set = update_blocks(previous, [(4, 4)], 2, flow_params)

    assert len(block_set.small_blocks) == 1
    merged = block_set.small_blocks[0]
    assert merged.sites == (2, 4)
    assert merged.scale == 2
    # one free site plus one contracted block
    assert merged.volume == 2.0
    assert merged.collar == tuple(range(0, 8))
    assert block_set.components == (frozenset({2, 4}),)


def test_update_blocks_absorbs_blocks_touching_their_collar(flow_params):
    previous = build_blocks_step1({2}, 20)

    block_set = update_blocks(previous, [(3, 3)], 2, flow_params)

    assert [b.sites for b in block_set.small_blocks] == [(2, 3)]
    assert block_set.small_blocks[0].scale == 2


def test_update_blocks_sends_long_components_to_large_region(flow_params):
    previous = BlockSet.empty(20, scale=1)

    block_set = update_blocks(previous, [(5, 7), (8, 9)], 2, flow_params)

    assert block_set.small_blocks == ()
    assert block_set.large_region == frozenset(range(5, 10))
    assert block_set.large_collar == frozenset(range(2, 13))
    assert block_set.components == (frozenset(range(5, 10)),)


@pytest.mark.parametrize(
    ("kwargs", "error_match"),
    [
        ({"k": 1}, "k >= 2"),
        ({"k": 3}, "has scale 1, expected 2"),
        ({"new_resonances": [(5, 3)]}, "start <= end"),
    ],
)
def test_update_blocks_validation(flow_params, kwargs, error_match):
    params = {
        "prev": BlockSet.empty(10, scale=1),
        "new_resonances": [],
        "k": 2,
        "p": flow_params,
    }
    params.update(kwargs)
    with pytest.raises(ValueError, match=error_match):
        update_blocks(**params)


def test_validate_block_set_detects_violations():
    overlapping = BlockSet(
        n=10,
        scale=1,
        small_blocks=(make_block([2], 1, 10), make_block([4], 1, 10)),
        resonant_sites=frozenset({2, 4}),
    )
    with pytest.raises(BlockInvariantError, match="overlap"):
        validate_block_set(overlapping)

    uncovered = BlockSet(n=10, scale=1, resonant_sites=frozenset({5}))
    with pytest.raises(BlockInvariantError, match="not in any block"):
        validate_block_set(uncovered)

    too_wide = BlockSet(
        n=10,
        scale=1,
        small_blocks=(
            Block(
                sites=(1, 3),
                scale=1,
                volume=2.0,
                collar=(1, 2, 3),
                outer_collar=(1, 2, 3),
            ),
        ),
    )
    with pytest.raises(BlockInvariantError, match="diameter 2"):
        validate_block_set(too_wide)


def test_contracted_distance_collapses_outer_collars():
    block_set = build_blocks_step1({10}, 20)

    assert contracted_distance(0, 19, block_set, 1) == 13
    assert contracted_distance(8, 12, block_set, 1) == 0
    assert contracted_distance(0, 19, block_set, 0) == 19


def test_same_group_matrix_kinds():
    block_set = build_blocks_step1({2, 3}, 6)

    p_matrix = same_group_matrix(block_set, "P", 1)
    r_matrix = same_group_matrix(block_set, "R", 1)

    assert p_matrix[2, 3] and p_matrix[3, 2]
    assert not p_matrix[1, 2]
    assert r_matrix[1, 4]
    assert not r_matrix[0, 1]
    assert (same_group_matrix(block_set, "Q", 1) == r_matrix).all()
    assert not same_group_matrix(block_set, "Q", 2).any()


def test_estimate_connectivity_counts_pairs():
    block_sets = [build_blocks_step1({2, 3}, 6), BlockSet.empty(6).advanced(1)]

    estimate = estimate_connectivity(block_sets, "P", 1, min_realizations=2)

    assert estimate.prob[2, 3] == 0.5
    assert estimate.prob[0, 5] == 0.0
    table = estimate.table
    assert len(table) == 36
    assert list(table.columns) == [
        "kind",
        "k",
        "x",
        "y",
        "prob",
        "ci_lo",
        "ci_hi",
        "n_realizations",
    ]
    by_distance = estimate.by_distance().set_index("distance")
    assert by_distance.loc[1, "prob"] == pytest.approx(0.1)
    assert by_distance.loc[0, "prob"] == pytest.approx(2.0 / 12.0)
    assert by_distance.loc[1, "n_pairs"] == 10


@pytest.mark.parametrize(
    ("kwargs", "error_match"),
    [
        ({"kind": "S"}, "kind must be one of"),
        ({"k": 2}, "has scale 1, expected 2"),
        ({"min_realizations": 100}, "at least 100 realizations"),
    ],
)
def test_estimate_connectivity_validation(kwargs, error_match):
    params = {
        "block_sets": [BlockSet.empty(4).advanced(1)],
        "kind": "P",
        "k": 1,
        "min_realizations": 1,
    }
    params.update(kwargs)
    with pytest.raises(ValueError, match=error_match):
        estimate_connectivity(**params)


def test_step1_bound_and_resonant_site_frequency():
    assert step1_bound(0.1, 0) == pytest.approx(0.2)
    assert step1_bound(0.1, 2) == pytest.approx(0.008)

    freq, lo, hi, samples = resonant_site_frequency([{1}, set(), {0, 2}], 4)

    assert freq == 0.25
    assert samples == 12
    assert lo < freq < hi
