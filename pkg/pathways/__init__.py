#!/usr/bin/env python3

from pathways.network import InterceptSpec, Network, backward, forward_record
from pathways.model_io import load_network, save_network
from pathways.contrib import contributions
from pathways.pathway import PathwayMask, build_frozen, select_pathway
from pathways.pruneobj import dgr_optimize, greedy_prune
from pathways.linearity import linear_region_radius, verify_linear_region
from pathways.attribution import pathway_gradient
