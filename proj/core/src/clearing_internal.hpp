#pragma once

// Internal market-to-QP layouts. Shared between the clearing operations and
// the simulation harness so per-step refreshes can poke QP coefficients
// directly instead of recompiling. Not installed.

#include <vector>

#include "peermarket/clearing.hpp"
#include "peermarket/model.hpp"
#include "peermarket/qp.hpp"

namespace peermarket::detail {

struct DirectedPair {
  int a = -1, b = -1;          // node indices, a < b
  int var_ab = -1, var_ba = -1;
  int recip_row = -1;
};

/** Variable map of the multi-bilateral QP: one variable per directed trade
 *  plus one aggregate net-injection variable per peer (which carries the
 *  peer's cost curve and bounds).
 */
struct FullP2pLayout {
  std::vector<DirectedPair> pairs;  // node index == peer index
  std::vector<int> s_var;           // per peer
  std::vector<int> agg_row;         // per peer
  int grid_idx = -1;                // peer index of the grid peer, -1 if none
  qp::QpProblem problem;
};

/// One community pool block: per-member (own, pool, import, export) plus the
/// community aggregates.
struct CommunityBlock {
  int community_idx = -1;           // into instance.communities
  std::vector<int> member_peer;     // peer indices, order of spec.members
  std::vector<int> own_var, pool_var, imp_var, exp_var;
  int qimp_var = -1, qexp_var = -1;
  std::vector<int> balance_row;
  int pool_row = -1, imp_row = -1, exp_row = -1;
  int coupling_row = -1;            // hybrid only
  bool default_external = true;     // G follows instance grid pricing
};

struct CommunityLayout {
  CommunityBlock block;
  qp::QpProblem problem;
};

/** Hybrid layout: community blocks at the bottom, a P2P trade structure
 *  among community managers and the grid peer on top. Upper node indices:
 *  0..C-1 are communities (instance order), node C is the grid peer.
 */
struct HybridLayout {
  std::vector<CommunityBlock> blocks;
  std::vector<DirectedPair> upper_pairs;
  int grid_idx = -1;     // peer index
  int grid_node = -1;    // upper node index
  int grid_s_var = -1;
  int grid_agg_row = -1;
  qp::QpProblem problem;
};

FullP2pLayout build_full_p2p(const MarketInstance& instance);
CommunityLayout build_community(const MarketInstance& instance,
                                int community_idx);
HybridLayout build_hybrid(const MarketInstance& instance);

ClearingResult extract_full_p2p(const MarketInstance& instance,
                                const FullP2pLayout& layout,
                                const qp::QpSolution& sol);
ClearingResult extract_community(const MarketInstance& instance,
                                 const CommunityLayout& layout,
                                 const qp::QpSolution& sol);
ClearingResult extract_hybrid(const MarketInstance& instance,
                              const HybridLayout& layout,
                              const qp::QpSolution& sol);

CommunityDecision extract_block_decision(const MarketInstance& instance,
                                         const CommunityBlock& block,
                                         const std::vector<double>& x);

}  // namespace peermarket::detail
