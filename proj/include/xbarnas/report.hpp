#pragma once

#include <string>
#include <vector>

#include "xbarnas/cost.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/search.hpp"

namespace xbarnas {

// One row of the efficiency report. xb_size is the common crossbar size when
// every mapped layer shares one, "mixed" otherwise; edap is recomputable from
// the row's own columns as energy_mJ * latency_smm2 * 1e3 (mJ*ms*mm^2).
struct ReportRow {
  std::string model;
  std::string xb_size;
  double i_accuracy = 0.0;
  double ni_accuracy = 0.0;
  double energy_mj = 0.0;
  double latency_smm2 = 0.0;
  double edap = 0.0;
};

// Crossbar-size label for a network: the shared N (default_n fills
// unassigned layers), or "mixed".
std::string xb_size_label(const Elaborated& net, int64_t default_n);

ReportRow make_report_row(const std::string& model, const Elaborated& net, int64_t default_n,
                          double i_accuracy, double ni_accuracy, const NetworkTotals& totals);

// CSV writers (atomic: temp file + rename).
// Trace: epoch,phase,loss,ce_loss,e_energy,e_latency.
void save_trace(const std::string& path, const std::vector<TraceRow>& rows);
// Report: model,xb_size,i_accuracy,ni_accuracy,energy_mJ,latency_smm2,edap.
void save_report(const std::string& path, const std::vector<ReportRow>& rows);
std::vector<ReportRow> load_report(const std::string& path);

// Plain-text listing of a search outcome: per-edge choice and per-layer N.
std::string search_summary(const NetworkSpec& compact, const SearchResult& result);

// Small shared helper: atomically write `text` to `path`.
void write_text_atomic(const std::string& path, const std::string& text);

}  // namespace xbarnas
