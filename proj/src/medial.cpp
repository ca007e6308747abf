#include "layercache/medial.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "layercache/errors.hpp"
#include "layercache/rng.hpp"

namespace layercache {

namespace {

// little-endian scalar io for the binary dataset files
void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put(std::ofstream& f, T v) {
  put_bytes(f, &v, sizeof(v));
}

void put_str(std::ofstream& f, const std::string& s) {
  if (s.size() > UINT16_MAX) throw error("string too long for dataset file");
  put<std::uint16_t>(f, static_cast<std::uint16_t>(s.size()));
  put_bytes(f, s.data(), s.size());
}

struct reader {
  std::ifstream f;
  std::string path;

  reader(const std::filesystem::path& p) : f(p, std::ios::binary), path(p.string()) {
    if (!f) throw missing_blob_error("cannot open " + path);
  }

  void get_bytes(void* p, std::size_t n) {
    if (!f.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) {
      throw parse_error(path + ": truncated");
    }
  }

  template <typename T>
  T get() {
    T v;
    get_bytes(&v, sizeof(v));
    return v;
  }

  std::string get_str() {
    const auto n = get<std::uint16_t>();
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }

  void expect_magic(const char* magic) {
    char m[4];
    get_bytes(m, 4);
    if (std::memcmp(m, magic, 4) != 0) {
      throw parse_error(path + ": bad magic, expected " + magic);
    }
  }

  void expect_eof() {
    f.peek();
    if (!f.eof()) throw parse_error(path + ": trailing data");
  }
};

void put_shape(std::ofstream& f, const std::vector<std::size_t>& dims) {
  put<std::uint32_t>(f, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) put<std::uint64_t>(f, d);
}

std::vector<std::size_t> get_shape(reader& r) {
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw parse_error(r.path + ": implausible rank");
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) d = static_cast<std::size_t>(r.get<std::uint64_t>());
  return dims;
}

}  // namespace

sample_set sample_set::subset(const std::vector<std::size_t>& idx) const {
  sample_set out;
  out.inputs = inputs.select_rows(idx);
  out.ids.reserve(idx.size());
  for (std::size_t i : idx) {
    out.ids.push_back(ids.at(i));
    if (has_labels()) out.labels.push_back(labels.at(i));
  }
  return out;
}

void sample_set::save(const std::filesystem::path& path) const {
  if (ids.size() != inputs.rows() || (has_labels() && labels.size() != ids.size())) {
    throw precondition_error("sample set fields disagree on record count");
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw error("cannot write " + path.string());
  put_bytes(f, "LCDS", 4);
  put<std::uint32_t>(f, 1);
  put<std::uint64_t>(f, ids.size());
  put_shape(f, inputs.sample_shape());
  put<std::uint8_t>(f, has_labels() ? 1 : 0);
  const std::size_t rs = inputs.row_size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    put_str(f, ids[i]);
    put_bytes(f, inputs.row(i), rs * 4);
    if (has_labels()) put<std::int32_t>(f, labels[i]);
  }
  if (!f) throw error("short write to " + path.string());
}

sample_set sample_set::load(const std::filesystem::path& path) {
  reader r(path);
  r.expect_magic("LCDS");
  if (r.get<std::uint32_t>() != 1) throw parse_error(path.string() + ": unsupported version");
  const auto count = static_cast<std::size_t>(r.get<std::uint64_t>());
  const auto dims = get_shape(r);
  const bool labeled = r.get<std::uint8_t>() != 0;

  sample_set out;
  std::vector<std::size_t> shape{count};
  shape.insert(shape.end(), dims.begin(), dims.end());
  out.inputs = tensor(std::move(shape));
  const std::size_t rs = out.inputs.row_size();
  out.ids.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.ids.push_back(r.get_str());
    r.get_bytes(out.inputs.row(i), rs * 4);
    if (labeled) out.labels.push_back(r.get<std::int32_t>());
  }
  r.expect_eof();
  return out;
}

std::vector<std::size_t> medial_dataset::split_indices(split_kind k) const {
  if (!split_assigned) throw precondition_error("medial dataset has no split assignment yet");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == k) idx.push_back(i);
  }
  return idx;
}

medial_dataset medial_dataset::view(split_kind k) const {
  const auto idx = split_indices(k);
  medial_dataset out;
  out.layer = layer;
  out.tap_shape = tap_shape;
  out.num_classes = num_classes;
  out.backbone_hash = backbone_hash;
  out.activations = activations.select_rows(idx);
  out.teachers = teachers.select_rows(idx);
  out.split_assigned = true;
  out.split.assign(idx.size(), k);
  out.ids.reserve(idx.size());
  for (std::size_t i : idx) out.ids.push_back(ids[i]);
  return out;
}

void medial_dataset::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw error("cannot write " + path.string());
  put_bytes(f, "LCMD", 4);
  put<std::uint32_t>(f, 1);
  put_str(f, layer);
  put_shape(f, tap_shape);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(num_classes));
  put_str(f, backbone_hash);
  put<std::uint8_t>(f, split_assigned ? 1 : 0);
  put<std::uint64_t>(f, ids.size());
  const std::size_t as = activations.row_size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    put_str(f, ids[i]);
    put<std::uint8_t>(f, split_assigned ? static_cast<std::uint8_t>(split[i]) : 0);
    put_bytes(f, activations.row(i), as * 4);
    put_bytes(f, teachers.row(i), num_classes * 4);
  }
  if (!f) throw error("short write to " + path.string());
}

medial_dataset medial_dataset::load(const std::filesystem::path& path) {
  reader r(path);
  r.expect_magic("LCMD");
  if (r.get<std::uint32_t>() != 1) throw parse_error(path.string() + ": unsupported version");
  medial_dataset out;
  out.layer = r.get_str();
  out.tap_shape = get_shape(r);
  out.num_classes = r.get<std::uint32_t>();
  out.backbone_hash = r.get_str();
  out.split_assigned = r.get<std::uint8_t>() != 0;
  const auto count = static_cast<std::size_t>(r.get<std::uint64_t>());

  std::vector<std::size_t> ashape{count};
  ashape.insert(ashape.end(), out.tap_shape.begin(), out.tap_shape.end());
  out.activations = tensor(std::move(ashape));
  out.teachers = tensor({count, out.num_classes});
  out.split.resize(count, split_kind::train);
  const std::size_t as = out.activations.row_size();
  for (std::size_t i = 0; i < count; ++i) {
    out.ids.push_back(r.get_str());
    const auto s = r.get<std::uint8_t>();
    if (s > 2) throw parse_error(path.string() + ": bad split tag");
    out.split[i] = static_cast<split_kind>(s);
    r.get_bytes(out.activations.row(i), as * 4);
    r.get_bytes(out.teachers.row(i), out.num_classes * 4);
  }
  r.expect_eof();
  return out;
}

std::vector<medial_dataset> collect(const backbone_graph& graph, const sample_set& samples,
                                    const std::vector<candidate_layer>& candidates,
                                    std::size_t batch_size) {
  if (samples.size() == 0) throw precondition_error("collect: no samples");
  if (batch_size == 0) throw precondition_error("collect: batch_size must be positive");

  const std::size_t n = samples.size();
  std::vector<medial_dataset> out(candidates.size());
  std::vector<std::string> tap_names;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto& cand = candidates[c];
    if (!graph.has_node(cand.node) || graph.node_shape(cand.node) != cand.tap_shape) {
      throw precondition_error("collect: candidate '" + cand.node +
                               "' does not match the backbone");
    }
    out[c].layer = cand.node;
    out[c].tap_shape = cand.tap_shape;
    out[c].num_classes = graph.num_classes();
    out[c].backbone_hash = graph.content_hash();
    out[c].ids = samples.ids;
    std::vector<std::size_t> ashape{n};
    ashape.insert(ashape.end(), cand.tap_shape.begin(), cand.tap_shape.end());
    out[c].activations = tensor(std::move(ashape));
    out[c].teachers = tensor({n, graph.num_classes()});
    out[c].split.resize(n, split_kind::train);
    tap_names.push_back(cand.node);
  }

  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    idx.resize(stop - start);
    for (std::size_t i = start; i < stop; ++i) idx[i - start] = i;
    const tensor batch = samples.inputs.select_rows(idx);
    std::map<std::string, tensor> taps;
    const tensor pds = graph.forward_with_taps(batch, tap_names, taps);
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const tensor& act = taps.at(candidates[c].node);
      const std::size_t as = act.row_size();
      for (std::size_t b = 0; b < idx.size(); ++b) {
        std::copy(act.row(b), act.row(b) + as, out[c].activations.row(idx[b]));
        std::copy(pds.row(b), pds.row(b) + pds.row_size(), out[c].teachers.row(idx[b]));
      }
    }
  }
  return out;
}

split_sizes compute_split_sizes(std::size_t n, double train_frac, double val_frac,
                                double test_frac) {
  if (train_frac <= 0 || val_frac <= 0 || test_frac <= 0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-6) {
    throw precondition_error("split ratios must be positive and sum to 1");
  }
  if (n < 3) throw precondition_error("splitting needs at least 3 records, got " +
                                      std::to_string(n));
  split_sizes s;
  s.val = static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(n)));
  s.test = static_cast<std::size_t>(std::floor(test_frac * static_cast<double>(n)));
  s.train = n - s.val - s.test;  // floor remainders land here
  return s;
}

void assign_splits(medial_dataset& md, double train_frac, double val_frac, double test_frac,
                   std::uint32_t seed) {
  const auto sizes = compute_split_sizes(md.size(), train_frac, val_frac, test_frac);
  rng gen(seed);
  const auto perm = gen.permutation(md.size());
  md.split.assign(md.size(), split_kind::train);
  for (std::size_t p = 0; p < perm.size(); ++p) {
    split_kind k = split_kind::train;
    if (p >= sizes.train) k = p < sizes.train + sizes.val ? split_kind::val : split_kind::test;
    md.split[perm[p]] = k;
  }
  md.split_assigned = true;
}

bool is_stale(const medial_dataset& md, const backbone_graph& graph) {
  return md.backbone_hash != graph.content_hash();
}

}  // namespace layercache
