#include "xbarnas/net.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "xbarnas/errors.hpp"

namespace xbarnas {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& src, int line, const std::string& msg) {
  throw ConfigError(src + ": line " + std::to_string(line) + ": " + msg);
}

// Parses "key=value" attribute tokens following the line keyword.
std::map<std::string, std::string> parse_attrs(const std::string& src, int lineno,
                                               std::istringstream& in) {
  std::map<std::string, std::string> attrs;
  std::string tok;
  while (in >> tok) {
    size_t eq = tok.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 >= tok.size())
      fail(src, lineno, "expected key=value attribute, got '" + tok + "'");
    attrs[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return attrs;
}

int64_t attr_int(const std::string& src, int lineno,
                 const std::map<std::string, std::string>& attrs, const std::string& key,
                 bool required, int64_t fallback = 0) {
  auto it = attrs.find(key);
  if (it == attrs.end()) {
    if (required) fail(src, lineno, "missing attribute '" + key + "'");
    return fallback;
  }
  try {
    size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    fail(src, lineno, "bad integer for '" + key + "': " + it->second);
  }
}

bool attr_bool(const std::string& src, int lineno,
               const std::map<std::string, std::string>& attrs, const std::string& key,
               bool fallback) {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  fail(src, lineno, "bad boolean for '" + key + "': " + it->second);
}

void check_kernel(const std::string& src, int lineno, int64_t k, bool zero_ok) {
  if (k == 0 && zero_ok) return;
  if (k < 1 || k % 2 == 0) fail(src, lineno, "kernel size must be odd, got " + std::to_string(k));
}

}  // namespace

NetworkSpec NetworkSpec::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open network spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str(), path);
}

NetworkSpec NetworkSpec::parse_string(const std::string& text, const std::string& name) {
  NetworkSpec spec;
  bool have_input = false;
  bool have_linear = false;
  int64_t cur_channels = 0;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    raw = trim(raw);
    if (raw.empty()) continue;
    std::istringstream ls(raw);
    std::string kw;
    ls >> kw;
    if (kw == "input") {
      if (have_input) fail(name, lineno, "duplicate input line");
      if (!(ls >> spec.in_channels >> spec.in_height >> spec.in_width))
        fail(name, lineno, "expected: input <C> <H> <W>");
      if (spec.in_channels < 1 || spec.in_height < 1 || spec.in_width < 1)
        fail(name, lineno, "input dimensions must be positive");
      have_input = true;
      cur_channels = spec.in_channels;
      continue;
    }
    if (!have_input) fail(name, lineno, "first line must be: input <C> <H> <W>");
    if (have_linear) fail(name, lineno, "linear must be the last layer");
    NetLine nl;
    auto attrs = parse_attrs(name, lineno, ls);
    if (kw == "conv") {
      nl.kind = NetLine::kConv;
      nl.k = attr_int(name, lineno, attrs, "k", true);
      nl.in = attr_int(name, lineno, attrs, "in", true);
      nl.out = attr_int(name, lineno, attrs, "out", true);
      nl.stride = attr_int(name, lineno, attrs, "s", false, 1);
      nl.searchable = attr_bool(name, lineno, attrs, "searchable", false);
      nl.n = attr_int(name, lineno, attrs, "n", false, 0);
      check_kernel(name, lineno, nl.k, false);
    } else if (kw == "block") {
      nl.kind = NetLine::kBlock;
      nl.in = attr_int(name, lineno, attrs, "in", true);
      nl.out = attr_int(name, lineno, attrs, "out", true);
      nl.stride = attr_int(name, lineno, attrs, "s", false, 1);
      nl.searchable = attr_bool(name, lineno, attrs, "searchable", false);
      nl.k1 = attr_int(name, lineno, attrs, "k1", false, 3);
      nl.k2 = attr_int(name, lineno, attrs, "k2", false, 3);
      nl.n1 = attr_int(name, lineno, attrs, "n1", false, 0);
      nl.n2 = attr_int(name, lineno, attrs, "n2", false, 0);
      check_kernel(name, lineno, nl.k1, true);
      check_kernel(name, lineno, nl.k2, true);
      if (nl.k1 == 0 && nl.k2 != 0 && (nl.in != nl.out || nl.stride != 1))
        fail(name, lineno, "k1=0 requires a shape-preserving block");
    } else if (kw == "linear") {
      nl.kind = NetLine::kLinear;
      nl.in = attr_int(name, lineno, attrs, "in", true);
      nl.out = attr_int(name, lineno, attrs, "out", true);
      nl.n = attr_int(name, lineno, attrs, "n", false, 0);
      have_linear = true;
    } else {
      fail(name, lineno, "unknown layer keyword '" + kw + "'");
    }
    if (nl.in < 1 || nl.out < 1) fail(name, lineno, "channel counts must be positive");
    if (nl.stride < 1) fail(name, lineno, "stride must be >= 1");
    if (nl.kind != NetLine::kLinear && nl.in != cur_channels)
      fail(name, lineno, "layer expects in=" + std::to_string(nl.in) + " but previous layer yields " +
                             std::to_string(cur_channels) + " channels");
    if (nl.kind != NetLine::kLinear) cur_channels = nl.out;
    spec.lines.push_back(nl);
  }
  if (!have_input) throw ConfigError(name + ": missing input line");
  // Elaboration re-derives spatial shapes and validates the linear width.
  elaborate(spec);
  return spec;
}

std::string NetworkSpec::to_string() const {
  std::ostringstream out;
  out << "input " << in_channels << " " << in_height << " " << in_width << "\n";
  for (const NetLine& nl : lines) {
    switch (nl.kind) {
      case NetLine::kConv:
        out << "conv k=" << nl.k << " in=" << nl.in << " out=" << nl.out << " s=" << nl.stride
            << " searchable=" << (nl.searchable ? "true" : "false");
        if (nl.n > 0) out << " n=" << nl.n;
        break;
      case NetLine::kBlock:
        out << "block in=" << nl.in << " out=" << nl.out << " s=" << nl.stride
            << " searchable=" << (nl.searchable ? "true" : "false");
        if (nl.k1 != 3 || nl.k2 != 3 || nl.n1 > 0 || nl.n2 > 0) {
          out << " k1=" << nl.k1 << " k2=" << nl.k2;
          if (nl.n1 > 0) out << " n1=" << nl.n1;
          if (nl.n2 > 0) out << " n2=" << nl.n2;
        }
        break;
      case NetLine::kLinear:
        out << "linear in=" << nl.in << " out=" << nl.out;
        if (nl.n > 0) out << " n=" << nl.n;
        break;
    }
    out << "\n";
  }
  return out.str();
}

void NetworkSpec::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write network spec: " + path);
  out << to_string();
}

namespace {

int64_t conv_out(int64_t size, int64_t k, int64_t stride) {
  int64_t pad = (k - 1) / 2;
  return (size + 2 * pad - k) / stride + 1;
}

}  // namespace

Elaborated elaborate(const NetworkSpec& spec) {
  Elaborated e;
  e.in_channels = spec.in_channels;
  e.in_height = spec.in_height;
  e.in_width = spec.in_width;

  int64_t c = spec.in_channels, h = spec.in_height, w = spec.in_width;
  int last = -1;  // slot feeding the next prim

  auto push = [&](Prim p) {
    e.prims.push_back(std::move(p));
    return static_cast<int>(e.prims.size()) - 1;
  };
  auto add_conv = [&](const std::string& name, int in_slot, int64_t k, int64_t ic, int64_t oc,
                      int64_t stride, bool searchable, int64_t n, int line) {
    Prim p;
    p.kind = Prim::kConv;
    p.name = name;
    p.in0 = in_slot;
    p.k = k;
    p.in_c = ic;
    p.out_c = oc;
    p.stride = stride;
    p.h_in = h;
    p.w_in = w;
    p.h_out = conv_out(h, k, stride);
    p.w_out = conv_out(w, k, stride);
    p.searchable = searchable;
    if (searchable) p.edge_id = e.num_edges++;
    p.n = n;
    p.line = line;
    return push(p);
  };
  auto add_simple = [&](Prim::Kind kind, const std::string& name, int in_slot, int64_t channels,
                        int line) {
    Prim p;
    p.kind = kind;
    p.name = name;
    p.in0 = in_slot;
    p.in_c = channels;
    p.out_c = channels;
    p.h_in = h;
    p.w_in = w;
    p.h_out = h;
    p.w_out = w;
    p.line = line;
    return push(p);
  };

  int block_no = 0;
  for (size_t li = 0; li < spec.lines.size(); ++li) {
    const NetLine& nl = spec.lines[li];
    int line = static_cast<int>(li);
    if (nl.kind == NetLine::kConv) {
      std::string base = "conv" + std::to_string(li);
      int s = add_conv(base, last, nl.k, nl.in, nl.out, nl.stride, nl.searchable, nl.n, line);
      h = e.prims[static_cast<size_t>(s)].h_out;
      w = e.prims[static_cast<size_t>(s)].w_out;
      c = nl.out;
      s = add_simple(Prim::kBatchNorm, base + ".bn", s, c, line);
      last = add_simple(Prim::kRelu, base + ".relu", s, c, line);
    } else if (nl.kind == NetLine::kBlock) {
      ++block_no;
      std::string base = "b" + std::to_string(block_no);
      int entry = last;
      int64_t eh = h, ew = w;
      bool identity_skip = (nl.in == nl.out && nl.stride == 1);
      bool drop1 = (nl.k1 == 0);
      bool drop2 = (nl.k2 == 0);

      int branch = -2;  // -2 = no branch
      if (!drop1 || !drop2) {
        int cur = entry;
        if (!drop1) {
          // The lone surviving conv carries the block's stride and channels.
          int s = add_conv(base + "c1", cur, nl.k1, nl.in, nl.out, nl.stride, nl.searchable,
                           nl.n1, line);
          h = e.prims[static_cast<size_t>(s)].h_out;
          w = e.prims[static_cast<size_t>(s)].w_out;
          c = nl.out;
          int b = add_simple(Prim::kBatchNorm, base + "c1.bn", s, c, line);
          if (drop2)
            branch = b;
          else
            cur = add_simple(Prim::kRelu, base + "c1.relu", b, c, line);
        }
        if (!drop2) {
          int s = add_conv(base + "c2", cur, nl.k2, drop1 ? nl.in : nl.out, nl.out,
                           drop1 ? nl.stride : 1, nl.searchable, nl.n2, line);
          h = e.prims[static_cast<size_t>(s)].h_out;
          w = e.prims[static_cast<size_t>(s)].w_out;
          c = nl.out;
          branch = add_simple(Prim::kBatchNorm, base + "c2.bn", s, c, line);
        }
      } else {
        // Dead branch: output is the skip path alone.
        h = conv_out(eh, 1, nl.stride);
        w = conv_out(ew, 1, nl.stride);
        c = nl.out;
      }

      int skip = entry;
      if (!identity_skip) {
        // Temporarily restore entry shape for the projection conv geometry.
        int64_t sh = h, sw = w;
        h = eh;
        w = ew;
        int s = add_conv(base + "proj", entry, 1, nl.in, nl.out, nl.stride, false,
                         nl.n1 > 0 ? nl.n1 : nl.n2, line);
        h = e.prims[static_cast<size_t>(s)].h_out;
        w = e.prims[static_cast<size_t>(s)].w_out;
        skip = add_simple(Prim::kBatchNorm, base + "proj.bn", s, nl.out, line);
        if (branch != -2 && (h != sh || w != sw))
          throw ConfigError("block " + base + ": branch/skip shape mismatch");
      }

      if (branch == -2) {
        if (identity_skip) {
          last = skip;  // fully collapsed block
          continue;
        }
        last = add_simple(Prim::kRelu, base + ".relu", skip, c, line);
        continue;
      }
      Prim p;
      p.kind = Prim::kAdd;
      p.name = base + ".add";
      p.in0 = branch;
      p.in1 = skip;
      p.in_c = p.out_c = c;
      p.h_in = p.h_out = h;
      p.w_in = p.w_out = w;
      p.line = line;
      int s = push(p);
      last = add_simple(Prim::kRelu, base + ".relu", s, c, line);
    } else {
      int64_t flat = c * h * w;
      if (nl.in != c && nl.in != flat)
        throw ConfigError("linear layer expects in=" + std::to_string(nl.in) +
                          " but incoming tensor has " + std::to_string(c) + " channels (" +
                          std::to_string(flat) + " flattened)");
      if (nl.in == c && h * w > 1) {
        last = add_simple(Prim::kAvgPool, "pool", last, c, line);
        h = 1;
        w = 1;
        e.prims[static_cast<size_t>(last)].h_out = 1;
        e.prims[static_cast<size_t>(last)].w_out = 1;
      }
      Prim p;
      p.kind = Prim::kLinear;
      p.name = "fc";
      p.in0 = last;
      p.in_c = nl.in;
      p.out_c = nl.out;
      p.h_in = p.w_in = 1;
      p.h_out = p.w_out = 1;
      p.n = nl.n;
      p.line = line;
      last = push(p);
      e.classes = nl.out;
    }
  }
  return e;
}

std::vector<int> Elaborated::mapped_prims() const {
  std::vector<int> out;
  for (size_t i = 0; i < prims.size(); ++i)
    if (prims[i].mapped()) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Elaborated::searchable_prims() const {
  std::vector<int> out(static_cast<size_t>(num_edges), -1);
  for (size_t i = 0; i < prims.size(); ++i)
    if (prims[i].edge_id >= 0) out[static_cast<size_t>(prims[i].edge_id)] = static_cast<int>(i);
  return out;
}

}  // namespace xbarnas
