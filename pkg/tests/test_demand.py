import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paneldml.demand import (Hierarchy, TreatmentSpec, affine_nuisance_lift, build_treatments,
                             experimental_elasticity, load_hierarchy_csv, per_pair_conversions,
                             per_pair_cross_elasticity)
from paneldml.errors import DataValidationError
from paneldml.first_stage import FirstStageConfig, cross_fit, predict_nuisances, residualize
from paneldml.panel_core import PanelDataset
from paneldml.pipeline import PipelineConfig, run_estimation


def price_panel(rng, n_items=8, n_periods=12, p=3, dates=None, weights=None):
    Z = rng.standard_normal((n_items, n_periods, p))
    P = Z @ np.array([0.5, -0.3, 0.2])[:p] + 0.4 * rng.standard_normal((n_items, n_periods))
    y = -1.5 * P + Z[:, :, 0] + rng.standard_normal((n_items, n_periods))
    return PanelDataset(y=y, treatments=P[:, :, None], controls=Z, group=np.arange(n_items) // 2,
                        price=P, treatment_labels=("price",), dates=dates, weights=weights)


def two_level_hierarchy(n_items=8):
    # level 1: A (items 1-4), B (5-8); level 2: pairs
    paths = {str(i + 1): ["A" if i < n_items // 2 else "B", f"n{i // 2}"] for i in range(n_items)}
    return Hierarchy.from_paths(paths)


def test_hierarchy_levels():
    h = two_level_hierarchy()
    assert h.at_level(1) == ("A", "B")
    assert h.at_level(2) == ("A/n0", "A/n1", "B/n2", "B/n3")
    assert h.members["A"] == frozenset({"1", "2", "3", "4"})
    assert h.children("A") == ("A/n0", "A/n1")
    assert h.nodes_of("6") == ("B", "B/n2")


def test_every_item_one_node_per_level():
    h = two_level_hierarchy()
    for lvl in (1, 2):
        seen = [it for n in h.at_level(lvl) for it in h.members[n]]
        assert sorted(seen) == sorted(set(seen))
    for node, parent in h.parent.items():
        if parent is not None:
            assert h.members[node] <= h.members[parent]


def test_load_hierarchy_csv(tmp_path):
    f = tmp_path / "h.csv"
    f.write_text("item,level1,level2\na,Drinks,Water\nb,Drinks,Soda\nc,Food,\n", encoding="utf-8")
    h = load_hierarchy_csv(f)
    assert h.members["Drinks/Water"] == frozenset({"a"})
    assert h.members["Food"] == frozenset({"c"})
    assert "Food/" not in h.members


def test_load_hierarchy_duplicate_item(tmp_path):
    f = tmp_path / "h.csv"
    f.write_text("item,level1\na,X\na,Y\n", encoding="utf-8")
    with pytest.raises(DataValidationError, match="duplicate item"):
        load_hierarchy_csv(f)


def test_leave_one_out_average_hand_case():
    P = np.array([[0.0], [0.3], [0.6]])
    data = PanelDataset(y=np.zeros((3, 1)), treatments=P[:, :, None], controls=np.zeros((3, 1, 0)),
                        group=[0, 0, 0], price=P)
    h = Hierarchy.from_paths({"1": ["K"], "2": ["K"], "3": ["K"]})
    new, table = build_treatments(data, h, TreatmentSpec(cross_nodes=("K",)))
    assert new.treatments[0, 0, 0] == pytest.approx(0.45, abs=1e-15)
    assert new.treatments[1, 0, 0] == pytest.approx(0.3, abs=1e-15)
    assert table == [dict(column=0, label="cross:K", kind="cross", node="K")]


def test_own_column_zero_outside_node(rng):
    data = price_panel(rng)
    new, _ = build_treatments(data, two_level_hierarchy(), TreatmentSpec(own_nodes=("A",)))
    assert np.array_equal(new.treatments[:4, :, 0], data.price[:4])
    assert np.all(new.treatments[4:, :, 0] == 0)


def test_singleton_cross_node_rejected(rng):
    h = Hierarchy.from_paths({"1": ["A", "x"], "2": ["A", "y"]})
    data = price_panel(rng, n_items=2)
    with pytest.raises(DataValidationError, match="leave-one-out average undefined"):
        build_treatments(data, h, TreatmentSpec(cross_nodes=("A/x",)))


def test_unknown_node_rejected(rng):
    with pytest.raises(DataValidationError, match="unknown hierarchy node"):
        build_treatments(price_panel(rng), two_level_hierarchy(), TreatmentSpec(own_nodes=("Z",)))


def test_missing_price_rejected(rng):
    data = price_panel(rng).replace(price=None)
    with pytest.raises(DataValidationError, match="price"):
        build_treatments(data, two_level_hierarchy(), TreatmentSpec(own_nodes=("A",)))


def _recompute(P, items, hier, spec, weights):
    cols = []
    for node in spec.own_nodes:
        cols.append(np.array([[P[i, t] if items[i] in hier.members[node] else 0.0
                               for t in range(P.shape[1])] for i in range(P.shape[0])]))
    for node in spec.cross_nodes:
        col = np.zeros_like(P)
        for i in range(P.shape[0]):
            if items[i] not in hier.members[node]:
                continue
            others = [j for j in range(P.shape[0]) if j != i and items[j] in hier.members[node]]
            w = np.array([weights[j] for j in others])
            col[i] = (w[:, None] * P[others]).sum(axis=0) / w.sum()
        cols.append(col)
    return np.stack(cols, axis=2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n_items=st.integers(2, 9),
       n_nodes=st.integers(1, 3), weighted=st.booleans())
def test_columns_reproducible_from_prices(seed, n_items, n_nodes, weighted):
    r = np.random.default_rng(seed)
    labels = r.integers(0, n_nodes, size=n_items)
    labels[:2] = 0  # at least one cross-eligible node
    hier = Hierarchy.from_paths({str(i + 1): ["all", f"c{labels[i]}"] for i in range(n_items)})
    weights = r.uniform(0.5, 3.0, n_items) if weighted else None
    data = price_panel(r, n_items=n_items, n_periods=4, weights=weights)
    own = tuple(n for n in hier.at_level(2))
    cross = tuple(n for n in hier.nodes if len(hier.members[n]) >= 2)
    spec = TreatmentSpec(own, cross, cross_weighting="weight" if weighted else "equal")
    new, table = build_treatments(data, hier, spec)
    assert new.n_treatments == len(own) + len(cross) == len(table)
    ref = _recompute(data.price, list(data.item_ids), hier, spec,
                     weights if weighted else np.ones(n_items))
    assert np.allclose(new.treatments, ref, atol=1e-14, rtol=0)


def test_month_dummies_add_twelve_columns(rng):
    dates = tuple(f"2020-{m:02d}-15" for m in range(1, 13))
    data = price_panel(rng, dates=dates)
    new, table = build_treatments(data, two_level_hierarchy(),
                                  TreatmentSpec(own_nodes=("A", "B"), month_dummies=True))
    assert new.n_treatments == 2 + 12
    for m in range(12):
        col = new.treatments[:, :, 2 + m]
        assert np.array_equal(col[:, m], data.price[:, m])
        assert np.all(np.delete(col, m, axis=1) == 0)
    assert table[2]["kind"] == "month" and table[2]["node"] == "1"


def test_month_dummies_need_dates(rng):
    with pytest.raises(DataValidationError, match="date"):
        build_treatments(price_panel(rng), two_level_hierarchy(),
                         TreatmentSpec(own_nodes=("A",), month_dummies=True))


# ---------------------------------------------------------- affine lifting


def test_lift_identity_and_mask(rng):
    data = price_panel(rng)
    new, _ = build_treatments(data, two_level_hierarchy(), TreatmentSpec(own_nodes=("A",)))
    p_hat = rng.standard_normal(data.price.shape)
    from paneldml.demand import AffineMap
    ident = AffineMap(np.ones(p_hat.shape))
    out = affine_nuisance_lift(p_hat, [ident, new.affine_maps[0], None])
    assert np.array_equal(out[:, :, 0], p_hat)
    assert np.array_equal(out[:4, :, 1], p_hat[:4]) and np.all(out[4:, :, 1] == 0)
    assert np.all(np.isnan(out[:, :, 2]))


def test_lift_two_member_cross():
    P = np.array([[1.0, 2.0], [3.0, 4.0]])
    data = PanelDataset(y=np.zeros((2, 2)), treatments=P[:, :, None], controls=np.zeros((2, 2, 0)),
                        group=[0, 1], price=P)
    h = Hierarchy.from_paths({"1": ["K"], "2": ["K"]})
    new, _ = build_treatments(data, h, TreatmentSpec(cross_nodes=("K",)))
    p_hat = np.array([[0.1, 0.2], [0.3, 0.4]])
    out = affine_nuisance_lift(p_hat, new.affine_maps)
    assert np.array_equal(out[0, :, 0], p_hat[1])
    assert np.array_equal(out[1, :, 0], p_hat[0])


@pytest.mark.parametrize("estimator", ["lasso", "dynamic_panel_lasso"])
def test_lifted_own_residual_is_masked_base_residual(rng, estimator):
    data = price_panel(rng, n_items=8, n_periods=10)
    hier = two_level_hierarchy()
    new, _ = build_treatments(data, hier, TreatmentSpec(own_nodes=hier.at_level(2),
                                                        cross_nodes=("A", "B")))
    cfg = FirstStageConfig(estimator=estimator, lambda_policy="cv:3", affine_lift=True)
    fits = cross_fit(new, config=cfg)
    assert fits.lifted == (True,) * 6
    res = residualize(new, fits)
    _, _, p_hat = predict_nuisances(new, fits)
    base_res = new.price - p_hat
    for j, node in enumerate(hier.at_level(2)):
        mask = np.array([it in hier.members[node] for it in new.item_ids], dtype=float)
        assert np.array_equal(res.d_res[:, :, j], mask[:, None] * base_res)


def test_item_permutation_relabels_estimates(rng):
    data = price_panel(rng, n_items=8, n_periods=10)
    hier = two_level_hierarchy()
    spec = TreatmentSpec(own_nodes=("A", "B"), cross_nodes=("A", "B"))
    cfg = PipelineConfig(first_stage=FirstStageConfig(lambda_policy="fixed:0.05",
                                                      affine_lift=True),
                         estimators=("ols",))
    new, _ = build_treatments(data, hier, spec)
    ref = run_estimation(new, cfg, seed=3)[0]["ols"]
    perm = np.array([5, 2, 7, 0, 3, 6, 1, 4])
    shuffled = PanelDataset(y=data.y[perm], treatments=data.treatments[perm],
                            controls=data.controls[perm], group=data.group[perm],
                            price=data.price[perm], item_ids=tuple(data.item_ids[i] for i in perm),
                            treatment_labels=("price",))
    new2, _ = build_treatments(shuffled, hier, spec)
    out = run_estimation(new2, cfg, seed=3)[0]["ols"]
    assert np.allclose(out.beta, ref.beta, atol=1e-9)
    assert np.allclose(out.se, ref.se, atol=1e-9)


# ------------------------------------------------------- conversion formulas


@pytest.mark.parametrize("n", [1, 2, 5, 12, 40])
def test_soft_drinks_per_pair(n):
    assert per_pair_cross_elasticity(0.637, n) == pytest.approx(0.637 / n, rel=1e-15)


def test_water_per_pair():
    assert per_pair_cross_elasticity(1.041, 10) == pytest.approx(0.1041, abs=1e-15)


def test_zero_coefficient_per_pair():
    assert per_pair_cross_elasticity(0.0, 7) == 0.0


def test_per_pair_rejects_empty_group():
    with pytest.raises(DataValidationError):
        per_pair_cross_elasticity(0.5, 0)


def test_both_conversions_labelled():
    out = per_pair_conversions(0.637, 8)
    assert out == {"per_product": pytest.approx(0.637 / 8), "per_other_member": pytest.approx(0.637 / 7)}
    assert math.isnan(per_pair_conversions(1.0, 1)["per_other_member"])


def test_experimental_elasticity_zero_numerator():
    assert experimental_elasticity(5.0, 5.0, 3.0, 3.0, 1.0, 2.0) == 0.0


def test_experimental_elasticity_arithmetic():
    q1 = 10.0
    v = experimental_elasticity(q1 * math.exp(-0.2), q1, 4.0, 4.0, 2.0 * math.exp(0.1), 2.0)
    assert v == pytest.approx(-2.0, abs=1e-12)


def test_experimental_elasticity_needs_price_variation():
    with pytest.raises(DataValidationError, match="no price variation"):
        experimental_elasticity(1.0, 1.0, 1.0, 1.0, 2.0, 2.0)


def test_experimental_elasticity_positive_inputs():
    with pytest.raises(DataValidationError, match="positive"):
        experimental_elasticity(0.0, 1.0, 1.0, 1.0, 2.0, 3.0)
