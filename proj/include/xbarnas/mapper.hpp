#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xbarnas/net.hpp"

namespace xbarnas {

// Partitioning of one layer's flattened weight matrix onto n x n crossbars.
// Convs unroll to rows = K*K*I, cols = O; linear layers use rows = I.
struct MappedLayer {
  int64_t rows_needed = 0;
  int64_t cols_needed = 0;
  int64_t n = 0;
  int64_t row_parts = 0;
  int64_t col_parts = 0;
  int64_t mvmu_count = 0;
  double utilization = 0.0;  // rows*cols / (mvmus * n^2), in (0, 1]
  int64_t vectors_per_inference = 0;  // output positions per inference
};

// One crossbar-sized piece of the weight matrix.
struct Chunk {
  int64_t row0 = 0, rows = 0;
  int64_t col0 = 0, cols = 0;
};

struct HierarchyConfig {
  int64_t mvmus_per_core = 2;
  int64_t cores_per_tile = 8;
  int64_t capacity() const { return mvmus_per_core * cores_per_tile; }
};

struct TileAllocation {
  std::vector<int64_t> tiles_per_layer;
  int64_t total_tiles = 0;
  int64_t idle_mvmu_slots = 0;  // allocated capacity minus used MVMUs
};

MappedLayer map_layer(const Prim& prim, int64_t n);
MappedLayer map_matrix(int64_t rows_needed, int64_t cols_needed, int64_t n,
                       int64_t vectors_per_inference);

// Row-major chunk list (row partitions outer, column partitions inner); the
// union of chunks covers the matrix exactly once.
std::vector<Chunk> chunk_layer(const MappedLayer& m);

TileAllocation allocate_tiles(const std::vector<MappedLayer>& layers, const HierarchyConfig& h);

// CSV table over the network's mapped prims, in network order. n_choices is
// aligned with net.mapped_prims(); a zero entry falls back to the prim's own
// n and a missing size is a config error.
std::string mapping_report(const Elaborated& net, const std::vector<int64_t>& n_choices,
                           const HierarchyConfig& h);

}  // namespace xbarnas
