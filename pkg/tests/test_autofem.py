import pytest
import torch

from asfd.autofem import (
    N_LEVELS, AutoFEM, AutoFemBundle, Connection, CpmBank, DerivedFPN, FpnCellSpec, PlainFPN, SearchFPN,
    check_pyramid, cpm_forward, fpn_forward, level_sizes, reference_bundle,
)
from asfd.io import bundle_from_text, bundle_to_text
from asfd.nas_core import CONV1X1_OP, DerivedCell, Genotype, SearchCell, op_index

C = 8


def pyramid(res=128, c=C, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(1, c, n, n, generator=g) for n in level_sizes(res)]


def identity_chain_cell(c=C):
    return DerivedCell(Genotype("cpm", [(i, [(i - 1, 1)]) for i in range(1, 7)], "cat_leaf", c)).init_identity()


def test_level_sizes_640():
    assert level_sizes(640) == [160, 80, 40, 20, 10, 5]


def test_lateral_identity_fpn_is_identity():
    fpn = DerivedFPN(FpnCellSpec.lateral_only(), C).init_identity()
    pyr = pyramid()
    out = fpn_forward(pyr, fpn)
    for a, b in zip(out, pyr):
        assert torch.allclose(a, b, atol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        FpnCellSpec([[Connection(i, "lateral", CONV1X1_OP)] for i in range(N_LEVELS - 1)] + [[Connection(3, "top_down", 3)]])
    with pytest.raises(ValueError):  # lateral must be 1x1
        FpnCellSpec([[Connection(i, "lateral", 3)] for i in range(N_LEVELS)])
    with pytest.raises(ValueError):  # non-neighbour
        FpnCellSpec([[Connection(i, "lateral", CONV1X1_OP)] + ([Connection(i + 2, "top_down", 3)] if i < 4 else [])
                     for i in range(N_LEVELS)])
    with pytest.raises(ValueError):
        FpnCellSpec([[] for _ in range(N_LEVELS)])


def _probe_dependencies(module, res=128):
    """reach[out] = input levels whose perturbation changes output ``out``."""
    torch.manual_seed(0)
    for p in module.parameters():
        torch.nn.init.uniform_(p, 0.05, 0.3)
    base_in = pyramid(res)
    base = module(base_in)
    reach = [set() for _ in range(N_LEVELS)]
    for src in range(N_LEVELS):
        probe = list(base_in)
        probe[src] = probe[src] + 1.0
        out = module(probe)
        for lvl in range(N_LEVELS):
            if not torch.equal(out[lvl], base[lvl]):
                reach[lvl].add(src)
    return reach


def test_top_down_chain_dataflow():
    spec = FpnCellSpec.top_down_chain(op=op_index("conv3x3"))
    for repeats in (1, 2, N_LEVELS - 1):
        reach = _probe_dependencies(DerivedFPN(spec, C, repeats))
        assert reach == spec.dependency(repeats)
        for lvl in range(N_LEVELS):
            assert reach[lvl] <= set(range(lvl, N_LEVELS))
    # enough repeats give the full classic top-down reach
    assert reach == [set(range(lvl, N_LEVELS)) for lvl in range(N_LEVELS)]


def test_reference_spec_dependency_matches_probe():
    spec = reference_bundle(C).fpn_spec
    for repeats in (1, 2):
        assert _probe_dependencies(DerivedFPN(spec, C, repeats)) == spec.dependency(repeats)


def test_plain_fpn_top_down():
    reach = _probe_dependencies(PlainFPN(C))
    assert reach == [set(range(lvl, N_LEVELS)) for lvl in range(N_LEVELS)]


def test_autofem_zero_level5_leaves_level2_when_no_path():
    spec = FpnCellSpec.top_down_chain(op=op_index("conv3x3"))
    # break the chain between levels 3 and 4 so level 5 cannot reach level 2
    levels = [list(c) for c in spec.levels]
    levels[3] = [Connection(3, "lateral", CONV1X1_OP)]
    spec = FpnCellSpec(levels)
    fem = AutoFEM(DerivedFPN(spec, C), CpmBank([identity_chain_cell() for _ in range(N_LEVELS)]))
    pyr = pyramid()
    zeroed = list(pyr)
    zeroed[5] = torch.zeros_like(pyr[5])
    assert torch.equal(fem(pyr)[2], fem(zeroed)[2])
    assert not torch.equal(fem(pyr)[4], fem(zeroed)[4])


def test_identity_fpn_and_cpms_give_identity():
    fem = AutoFEM(DerivedFPN(FpnCellSpec.lateral_only(), C).init_identity(),
                  CpmBank([identity_chain_cell() for _ in range(N_LEVELS)]))
    pyr = pyramid()
    for a, b in zip(fem(pyr), pyr):
        assert torch.allclose(a, b, atol=1e-6)


def test_cpm_identity_and_width():
    cell = identity_chain_cell()
    x = torch.rand(2, C, 16, 16)
    assert torch.allclose(cpm_forward(x, cell), x, atol=1e-6)
    with pytest.raises(ValueError):
        cpm_forward(torch.rand(1, C + 1, 4, 4), cell)


def test_reference_width_preserved():
    g = Genotype("cpm", [(i, [(i - 1, 3)]) for i in range(1, 7)], "cat_all", 256)
    assert DerivedCell(g).project.in_channels == 1536
    fem = AutoFEM.from_bundle(reference_bundle(256))
    pyr = [torch.rand(1, 256, n, n) for n in level_sizes(128)]
    out = fem(pyr)
    assert [o.shape for o in out] == [p.shape for p in pyr]


def _footprint(cell, size=33):
    x = torch.zeros(1, C, size, size)
    x[..., size // 2, size // 2] = 1.0
    x.requires_grad_(True)
    cell(x)[0, :, size // 2, size // 2].sum().backward()
    return int((x.grad.abs().sum(1)[0] > 0).sum())


def test_dilated_low_level_cpm_has_larger_receptive_field():
    torch.manual_seed(0)
    low = DerivedCell(reference_bundle(C).cpm_genotypes[0])
    for p in low.parameters():
        torch.nn.init.uniform_(p, 0.05, 0.2)
    assert _footprint(low) > _footprint(identity_chain_cell()) == 1


def test_bank_size_error():
    with pytest.raises(ValueError):
        CpmBank([identity_chain_cell() for _ in range(5)])
    with pytest.raises(ValueError):
        AutoFEM(None, None)(pyramid()[:5])


def test_bank_requires_identical_width():
    g8 = Genotype("cpm", [(1, [(0, 1)])], "cat_leaf", 8)
    g16 = Genotype("cpm", [(1, [(0, 1)])], "cat_leaf", 16)
    with pytest.raises(ValueError):
        CpmBank.derived([g8] * 5 + [g16])


def test_check_pyramid():
    pyr = pyramid()
    check_pyramid(pyr)
    with pytest.raises(ValueError):
        check_pyramid(pyr[:-1] + [torch.rand(1, C, 3, 3)])


def test_search_fpn_single_path_and_mixed_shapes():
    for mode in ("single_path", "mixed"):
        fpn = SearchFPN(C, k=4, mode=mode)
        out = fpn(pyramid())
        assert [o.shape for o in out] == [p.shape for p in pyramid()]
    single = SearchFPN(C, k=4)
    single(pyramid())
    assert single.counter.count == N_LEVELS


def test_search_to_derive_consistency():
    """Saturated arch weights: single-path supernet == derived network."""
    torch.manual_seed(0)
    fem = AutoFEM(SearchFPN(C, k=1), CpmBank.searchable(C, 4, k=1)).double()
    conv3 = op_index("conv3x3")
    with torch.no_grad():
        fpn = fem.fpn
        fpn.arch_alpha.fill_(0.0)
        fpn.arch_alpha[:, conv3] = 200.0
        fpn.arch_beta.fill_(0.0)
        for e, (lvl, src, kind) in enumerate(fpn.edges):
            fpn.arch_beta[e] = 200.0 if kind == "top_down" or lvl == N_LEVELS - 1 else -200.0
        for cell in fem.cpm.cells:
            cell.arch_alpha.fill_(0.0)
            cell.arch_alpha[:, conv3] = 200.0
            cell.arch_beta.fill_(-200.0)
            for node in cell.topology.node_ids:
                e = [i for i in cell.topology.incoming(node) if cell.topology.edges[i][1] == node - 1][0]
                cell.arch_beta[e] = 200.0
    bundle = fem.derive(retain_k=1, output_rule="cat_all", fpn_retain_k=1)
    derived = AutoFEM.from_bundle(bundle).double()
    # copy weights of the chosen paths
    with torch.no_grad():
        for lvl, conns in enumerate(bundle.fpn_spec.levels):
            mods = derived.fpn.layers[0][lvl]
            for c, m in zip(conns, mods):
                if c.kind == "lateral":
                    m[1].load_state_dict(fpn.lateral[lvl].state_dict())
                else:
                    e = fpn.edges.index((lvl, c.source, c.kind))
                    if c.kind == "bottom_up":
                        m[0].load_state_dict(fpn.resample[e].state_dict())
                    m[1].load_state_dict(fpn.edge_ops[e][c.op].state_dict())
        for scell, dcell in zip(fem.cpm.cells, derived.cpm.cells):
            for node, ins in dcell.genotype.nodes:
                for src, op in ins:
                    e = scell.topology.edges.index((node, src))
                    dcell.edge_ops[f"{node}_{src}"].load_state_dict(scell.edge_ops[e][op].state_dict())
            dcell.project.load_state_dict(scell.project.state_dict())
    pyr = [p.double() for p in pyramid(128, C)]
    for a, b in zip(fem(pyr), derived(pyr)):
        assert torch.allclose(a, b, atol=1e-5)


def test_bundle_round_trip_and_none_parts():
    b = reference_bundle(C)
    text = bundle_to_text(b)
    assert bundle_to_text(bundle_from_text(text)) == text
    partial = AutoFemBundle(None, b.cpm_genotypes, C)
    assert bundle_from_text(bundle_to_text(partial)).fpn_spec is None
