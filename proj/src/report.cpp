#include "xbarnas/report.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xbarnas/errors.hpp"

namespace xbarnas {

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot write " + tmp);
    f << text;
    if (!f) throw MissingArtifactError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw MissingArtifactError("cannot rename " + tmp + " to " + path);
}

std::string xb_size_label(const Elaborated& net, int64_t default_n) {
  int64_t common = 0;
  bool mixed = false;
  for (int idx : net.mapped_prims()) {
    const Prim& p = net.prims[static_cast<size_t>(idx)];
    int64_t n = p.n > 0 ? p.n : default_n;
    if (common == 0)
      common = n;
    else if (n != common)
      mixed = true;
  }
  if (common == 0) return "none";
  return mixed ? "mixed" : std::to_string(common);
}

ReportRow make_report_row(const std::string& model, const Elaborated& net, int64_t default_n,
                          double i_accuracy, double ni_accuracy, const NetworkTotals& totals) {
  ReportRow r;
  r.model = model;
  r.xb_size = xb_size_label(net, default_n);
  r.i_accuracy = i_accuracy;
  r.ni_accuracy = ni_accuracy;
  r.energy_mj = totals.energy_mj;
  r.latency_smm2 = totals.latency_smm2;
  r.edap = r.energy_mj * r.latency_smm2 * 1e3;
  return r;
}

void save_trace(const std::string& path, const std::vector<TraceRow>& rows) {
  std::string out = "epoch,phase,loss,ce_loss,e_energy,e_latency\n";
  char buf[192];
  for (const TraceRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%c,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.phase, r.loss,
                  r.ce_loss, r.e_energy, r.e_latency);
    out += buf;
  }
  write_text_atomic(path, out);
}

void save_report(const std::string& path, const std::vector<ReportRow>& rows) {
  std::string out = "model,xb_size,i_accuracy,ni_accuracy,energy_mJ,latency_smm2,edap\n";
  char buf[256];
  for (const ReportRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%.6g,%.10g,%.10g,%.10g\n", r.model.c_str(),
                  r.xb_size.c_str(), r.i_accuracy, r.ni_accuracy, r.energy_mj, r.latency_smm2,
                  r.edap);
    out += buf;
  }
  write_text_atomic(path, out);
}

std::vector<ReportRow> load_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("cannot open report " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("model,", 0) != 0)
    throw ConfigError(path + ": not a report file");
  std::vector<ReportRow> rows;
  int no = 1;
  while (std::getline(f, line)) {
    ++no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    ReportRow r;
    std::string field;
    auto next = [&](const char* what) {
      if (!std::getline(ss, field, ','))
        throw ConfigError(path + ":" + std::to_string(no) + ": missing " + what);
      return field;
    };
    r.model = next("model");
    r.xb_size = next("xb_size");
    try {
      r.i_accuracy = std::stod(next("i_accuracy"));
      r.ni_accuracy = std::stod(next("ni_accuracy"));
      r.energy_mj = std::stod(next("energy_mJ"));
      r.latency_smm2 = std::stod(next("latency_smm2"));
      r.edap = std::stod(next("edap"));
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(no) + ": malformed number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string search_summary(const NetworkSpec& compact, const SearchResult& result) {
  std::ostringstream os;
  os << "chosen candidates per edge:\n";
  for (size_t e = 0; e < result.chosen_candidate.size(); ++e)
    os << "  edge " << e << " -> candidate " << result.chosen_candidate[e] << "\n";
  os << "expected energy (mJ): " << result.e_energy << "\n";
  os << "expected latency-area (ms*mm^2): " << result.e_latency << "\n";
  os << "aborted arch steps: " << result.aborted_arch_steps << "\n";
  os << "extracted network:\n";
  Elaborated net = elaborate(compact);
  for (int idx : net.mapped_prims()) {
    const Prim& p = net.prims[static_cast<size_t>(idx)];
    os << "  " << p.name << ": " << (p.kind == Prim::kLinear ? "linear" : "conv");
    if (p.kind == Prim::kConv) os << " k=" << p.k;
    os << " in=" << p.in_c << " out=" << p.out_c;
    os << " n=" << (p.n > 0 ? std::to_string(p.n) : std::string("default")) << "\n";
  }
  return os.str();
}

}  // namespace xbarnas
