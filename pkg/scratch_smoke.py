import math
import time

import numpy as np

from geobundle import autodiff as ad
from geobundle import graphs as gr
from geobundle import layers as ly
from geobundle import pretrain as pt
from geobundle import spaces as sp

g = gr.load_edge_list('data/karate.edges')
model = ly.ModelConfig()
cfg = pt.TrainConfig(epochs=2, seed=7)
state = pt._prepare_state(g, model, cfg)
print('state coords', np.shape(state.tree.coords),
      'residual tree', np.max(np.abs(sp.k_inner(state.tree.coords, state.tree.coords, -1.0) + 1)))
print('residual cycle', np.max(np.abs(sp.k_inner(state.cycle.coords, state.cycle.coords, 1.0) - 1)))
print('tangency', np.max(np.abs(sp.k_inner(state.tree.encs, state.tree.coords, -1.0))))

trees, cycles = pt._sample_epoch(g, cfg, [7, 1, 0])
params = ly.init_params(model, np.random.default_rng([7, 0]))
t0 = time.time()
out = ly.forward_stack(state, trees, cycles, params, model)
print('fwd (numpy) %.3fs' % (time.time() - t0))
print('out residual tree', np.max(np.abs(sp.k_inner(out.tree.coords, out.tree.coords, -1.0) + 1)))
print('out residual cycle', np.max(np.abs(sp.k_inner(out.cycle.coords, out.cycle.coords, 1.0) - 1)))
print('out tangency tree', np.max(np.abs(sp.k_inner(out.tree.encs, out.tree.coords, -1.0))))

l1 = pt.contrastive_loss(out, [5])
print('N=1 loss', float(ad.val(l1)))

st2 = ly.BundleState(
    tree=ly.FactorState(model.tree_spec, np.stack([state.tree.coords[0]] * 2),
                        np.stack([state.tree.encs[0]] * 2)),
    cycle=ly.FactorState(model.cycle_spec, np.stack([state.cycle.coords[0]] * 2),
                         np.stack([state.cycle.encs[0]] * 2)))
hv, sv = pt.pole_views(st2, [0, 1])
S = hv @ sv.T
print('S const?', np.allclose(S, S[0, 0]),
      'loss', float(pt.contrastive_loss(st2, [0, 1])), 'expected', 4 * math.log(2))

t0 = time.time()
val, grads = pt._step_shard(state, trees, cycles, params, model, cfg,
                            np.arange(34), np.random.default_rng(0))
print('tape step %.3fs loss %.4f ngrads %d' % (time.time() - t0, val, len(grads)))
