#pragma once

// Hand-built instances with analytically known optima.

#include "peermarket/model.hpp"

namespace testfix {

/// Producer C = 0.5 p^2 on [0, 10]; consumer C = 0.5 p^2 + 10 p on [-10, 0].
/// Optimal bilateral trade 5 MW at price 5 $/MWh, welfare 25 $.
inline peermarket::MarketInstance bilateral(double per_trade_fee = 0.0) {
  using namespace peermarket;
  MarketInstance inst;
  Peer seller;
  seller.id = "seller";
  seller.role = PeerRole::producer;
  seller.bus = 2;
  seller.cost = {0.5, 0.0, 0.0};
  seller.bounds = {0.0, 10.0};
  Peer buyer;
  buyer.id = "buyer";
  buyer.role = PeerRole::consumer;
  buyer.bus = 3;
  buyer.cost = {0.5, 10.0, 0.0};
  buyer.bounds = {-10.0, 0.0};
  inst.peers = {seller, buyer};
  inst.tx_costs.per_trade_fee = per_trade_fee;
  inst.partner_graph = PartnerGraph::default_graph(inst.peers);
  return inst;
}

/// Same pair wrapped into one community with a free internal pool and
/// prohibitive external prices; reduces to the bilateral oracle.
inline peermarket::MarketInstance bilateral_community() {
  using namespace peermarket;
  MarketInstance inst = bilateral();
  inst.design = MarketDesign::community;
  inst.grid.price = 500.0;
  inst.grid.tariff = 500.0;  // import at 1000, export at 0: never worthwhile
  CommunitySpec spec;
  spec.id = "c1";
  spec.members = {"seller", "buyer"};
  inst.communities.push_back(spec);
  inst.peers[0].community = "c1";
  inst.peers[1].community = "c1";
  return inst;
}

/// Single must-take producer of 3 MW whose only option is exporting at
/// 20 $/MWh (grid price 30, tariff 10): welfare 60 $.
inline peermarket::MarketInstance single_must_take_community() {
  using namespace peermarket;
  MarketInstance inst;
  inst.design = MarketDesign::community;
  inst.grid.price = 30.0;
  inst.grid.tariff = 10.0;
  Peer pv;
  pv.id = "pv";
  pv.role = PeerRole::producer;
  pv.bus = 2;
  pv.must_take = true;
  pv.bounds = PowerBounds::fixed(3.0);
  pv.community = "c1";
  inst.peers = {pv};
  CommunitySpec spec;
  spec.id = "c1";
  spec.members = {"pv"};
  inst.communities.push_back(spec);
  inst.partner_graph = PartnerGraph::default_graph(inst.peers);
  return inst;
}

}  // namespace testfix
