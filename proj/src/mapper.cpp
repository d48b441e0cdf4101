#include "xbarnas/mapper.hpp"

#include <algorithm>
#include <cstdio>

#include "xbarnas/errors.hpp"

namespace xbarnas {

MappedLayer map_matrix(int64_t rows_needed, int64_t cols_needed, int64_t n,
                       int64_t vectors_per_inference) {
  if (rows_needed < 1 || cols_needed < 1)
    throw ConfigError("mapping needs a non-empty weight matrix");
  if (n < 1) throw ConfigError("crossbar size must be at least 1");
  MappedLayer m;
  m.rows_needed = rows_needed;
  m.cols_needed = cols_needed;
  m.n = n;
  m.row_parts = (rows_needed + n - 1) / n;
  m.col_parts = (cols_needed + n - 1) / n;
  m.mvmu_count = m.row_parts * m.col_parts;
  m.utilization = static_cast<double>(rows_needed * cols_needed) /
                  static_cast<double>(m.mvmu_count * n * n);
  m.vectors_per_inference = vectors_per_inference;
  return m;
}

MappedLayer map_layer(const Prim& prim, int64_t n) {
  if (!prim.mapped()) throw ConfigError("layer " + prim.name + " does not map to crossbars");
  const int64_t vectors = prim.kind == Prim::kLinear ? 1 : prim.h_out * prim.w_out;
  return map_matrix(prim.rows_needed(), prim.cols_needed(), n, vectors);
}

std::vector<Chunk> chunk_layer(const MappedLayer& m) {
  std::vector<Chunk> chunks;
  chunks.reserve(static_cast<size_t>(m.mvmu_count));
  for (int64_t rp = 0; rp < m.row_parts; ++rp) {
    for (int64_t cp = 0; cp < m.col_parts; ++cp) {
      Chunk c;
      c.row0 = rp * m.n;
      c.rows = std::min(m.n, m.rows_needed - c.row0);
      c.col0 = cp * m.n;
      c.cols = std::min(m.n, m.cols_needed - c.col0);
      chunks.push_back(c);
    }
  }
  return chunks;
}

TileAllocation allocate_tiles(const std::vector<MappedLayer>& layers, const HierarchyConfig& h) {
  if (h.mvmus_per_core < 1 || h.cores_per_tile < 1)
    throw ConfigError("hierarchy sizes must be at least 1");
  TileAllocation alloc;
  alloc.tiles_per_layer.reserve(layers.size());
  const int64_t cap = h.capacity();
  for (const MappedLayer& m : layers) {
    int64_t tiles = (m.mvmu_count + cap - 1) / cap;
    alloc.tiles_per_layer.push_back(tiles);
    alloc.total_tiles += tiles;
    alloc.idle_mvmu_slots += tiles * cap - m.mvmu_count;
  }
  return alloc;
}

std::string mapping_report(const Elaborated& net, const std::vector<int64_t>& n_choices,
                           const HierarchyConfig& h) {
  std::string out = "layer,N,rows,cols,row_parts,col_parts,mvmus,utilization,tiles\n";
  const std::vector<int> mapped = net.mapped_prims();
  if (n_choices.size() != mapped.size())
    throw ConfigError("mapping report needs one crossbar size per mapped layer");
  char buf[256];
  for (size_t k = 0; k < mapped.size(); ++k) {
    const Prim& p = net.prims[static_cast<size_t>(mapped[k])];
    int64_t n = n_choices[k] > 0 ? n_choices[k] : p.n;
    if (n <= 0)
      throw ConfigError("no crossbar size assigned for layer " + p.name);
    MappedLayer m = map_layer(p, n);
    TileAllocation alloc = allocate_tiles({m}, h);
    std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%lld,%lld,%lld,%lld,%.6g,%lld\n",
                  p.name.c_str(), static_cast<long long>(n),
                  static_cast<long long>(m.rows_needed), static_cast<long long>(m.cols_needed),
                  static_cast<long long>(m.row_parts), static_cast<long long>(m.col_parts),
                  static_cast<long long>(m.mvmu_count), m.utilization,
                  static_cast<long long>(alloc.total_tiles));
    out += buf;
  }
  return out;
}

}  // namespace xbarnas
