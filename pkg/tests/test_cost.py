from netcarve import (
    GraphBuilder,
    build_dependency_partition,
    cost_report,
    count_macs,
    count_params,
    shrink,
    validate,
)
from netcarve.corpus import generate_corpus
from netcarve.shrink import compute_survivors


def single_conv_model(bias=True):
    b = GraphBuilder(input_name="x")
    t = b.conv("x", 3, 16, "conv", k=3, bias=bias)
    return validate(b.finish(t))


def conv_bn_model():
    b = GraphBuilder(input_name="x")
    t = b.conv("x", 3, 16, "conv", k=3, bias=True)
    t = b.bn(t, 16, "norm")
    t = b.conv(t, 16, 4, "head", k=1)
    return validate(b.finish(t))


def test_single_conv_param_fixture():
    report = count_params(single_conv_model())
    assert report.params == 16 * 3 * 3 * 3 + 16 == 448


def test_conv_bn_param_fixture():
    model = conv_bn_model()
    report = count_params(model)
    assert report.param_breakdown["conv"] == 448
    assert report.param_breakdown["norm"] == 32
    assert report.params == 448 + 32 + 64  # head conv 4*16*1*1


def test_running_stats_excluded_from_headline():
    report = count_params(conv_bn_model())
    assert report.running_stat_params == 32  # mean + var
    assert report.bookkeeping_params == 0


def test_single_conv_mac_fixture():
    report = count_macs(single_conv_model(), (1, 3, 64, 128))
    assert report.macs == 16 * 64 * 128 * 27 == 3538944


def test_1x1_conv_mac_fixture():
    b = GraphBuilder(input_name="x")
    t = b.conv("x", 16, 8, "c", k=1)
    model = validate(b.finish(t))
    assert count_macs(model, (1, 16, 32, 32)).macs == 8 * 32 * 32 * 16 == 131072


def test_batch_scales_macs():
    model = single_conv_model()
    assert count_macs(model, (2, 3, 64, 128)).macs == 2 * 3538944


def test_scatter_chain_contributes_zero_macs(residual_model):
    from netcarve.pruning import PruneMask

    part = build_dependency_partition(residual_model)
    mask = PruneMask({"blk.conv.out": (0, 1, 2)})
    shrunk, report = shrink(residual_model, part, mask)
    assert report.scatter_nodes >= 1
    base = count_macs(residual_model, (1, 3, 8, 8))
    after = count_macs(shrunk, (1, 3, 8, 8))
    # pruned conv shrinks its own MACs; scatter/transpose/zeros add exactly 0
    expected = sum(after.mac_breakdown.values())
    assert after.macs == expected
    assert set(after.mac_breakdown) == {n.id for n in shrunk.nodes if n.op == "Conv"}
    assert after.macs < base.macs


def test_bookkeeping_constants_excluded(residual_model):
    from netcarve.pruning import PruneMask

    part = build_dependency_partition(residual_model)
    mask = PruneMask({"blk.conv.out": (0, 1, 2)})
    shrunk, _ = shrink(residual_model, part, mask)
    report = count_params(shrunk)
    assert report.bookkeeping_params > 0  # scatter indices + zeros shape
    manual = 0
    for node in shrunk.nodes:
        if node.op == "Conv":
            manual += shrunk.params[node.inputs[1]].size
            if len(node.inputs) == 3:
                manual += shrunk.params[node.inputs[2]].size
        elif node.op == "BatchNorm":
            manual += shrunk.params[node.inputs[1]].size + shrunk.params[node.inputs[2]].size
    assert report.params == manual


def test_totals_equal_breakdown_sums(hrnet8):
    report = count_macs(hrnet8, (1, 3, 32, 32))
    assert report.params == sum(report.param_breakdown.values())
    assert report.macs == sum(report.mac_breakdown.values())


def test_fraction_fields_with_baseline(hrnet8):
    from netcarve.pruning import PruneMask
    from netcarve import score_channels, select_mask

    part = build_dependency_partition(hrnet8)
    mask = select_mask(score_channels(hrnet8, part), part, 0.5, "channel-fraction")
    shrunk, _ = shrink(hrnet8, part, mask)
    report = cost_report(shrunk, (2, 3, 32, 32), baseline=hrnet8)
    assert 0 < report.param_fraction < 1
    assert 0 < report.mac_fraction < 1


def test_count_params_matches_kept_slice_closed_form():
    """After shrinking, the headline count equals the sum over kept slices."""
    for model, partition, mask in generate_corpus(18, seed=21):
        shrunk, report = shrink(model, partition, mask)
        surv = compute_survivors(partition, mask)
        expected = 0
        for node in model.nodes:
            if node.op == "Conv":
                out_keep = surv[partition.tensor_group[node.outputs[0]]]
                in_keep = surv[partition.tensor_group[node.inputs[0]]]
                k = model.params[node.inputs[1]].shape[2:]
                expected += len(out_keep) * len(in_keep) * k[0] * k[1]
                if len(node.inputs) == 3:
                    expected += len(out_keep)
            elif node.op == "BatchNorm":
                keep = surv[partition.tensor_group[node.inputs[0]]]
                expected += 2 * len(keep)
        assert count_params(shrunk).params == expected == report.params_after
