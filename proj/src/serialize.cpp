#include "tsdp/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tsdp::io {

static_assert(std::endian::native == std::endian::little,
              "container encoding assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'S', 'D', 'P'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError("truncated TSDP container");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode(const Container& c) {
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, kFormatVersion);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(c.kind));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.blobs.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.chunks.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.blobs) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, offset);
    offset += t.size() * sizeof(double);
  }
  for (const auto& [name, t] : c.blobs) {
    out.append(reinterpret_cast<const char*>(t.vec().data()), t.size() * sizeof(double));
  }
  for (const auto& [tag, bytes] : c.chunks) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tag.size()));
    out += tag;
    put<std::uint64_t>(out, bytes.size());
    out += bytes;
  }
  return out;
}

Container decode(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw FormatError("bad magic, not a TSDP file");
  const auto version = r.get<std::uint16_t>();
  if (version != kFormatVersion) {
    throw FormatError("unsupported TSDP format version " + std::to_string(version));
  }
  Container c;
  c.kind = static_cast<ContainerKind>(r.get<std::uint16_t>());
  const auto n_blobs = r.get<std::uint32_t>();
  const auto n_chunks = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> table;
  for (std::uint32_t i = 0; i < n_blobs; ++i) {
    Entry e;
    e.name = std::string(r.bytes(r.get<std::uint16_t>()));
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    table.push_back(std::move(e));
  }
  const std::size_t base = r.pos();
  std::uint64_t blob_bytes = 0;
  for (const auto& e : table) {
    const std::size_t n = shape_numel(e.shape);
    const std::size_t at = base + e.offset;
    if (at + n * sizeof(double) > bytes.size()) throw FormatError("blob " + e.name + " out of range");
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + at, n * sizeof(double));
    c.blobs.emplace(e.name, Tensor(e.shape, std::move(data)));
    blob_bytes = std::max<std::uint64_t>(blob_bytes, e.offset + n * sizeof(double));
  }
  r.bytes(blob_bytes);
  for (std::uint32_t i = 0; i < n_chunks; ++i) {
    std::string tag(r.bytes(r.get<std::uint32_t>()));
    c.chunks[tag] = std::string(r.bytes(r.get<std::uint64_t>()));
  }
  return c;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write to " + path.string() + " failed");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

nlohmann::json topology_json(const ModelGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes()) {
    const auto& l = n.layer;
    nodes.push_back({{"name", l.name},
                     {"kind", std::string(to_string(l.kind))},
                     {"inputs", n.inputs},
                     {"c_in", l.c_in},
                     {"c_out", l.c_out},
                     {"kernel", l.kernel},
                     {"stride", l.stride},
                     {"padding", l.padding},
                     {"has_bias", l.has_bias},
                     {"bn_eps", l.bn_eps},
                     {"bn_momentum", l.bn_momentum},
                     {"role", n.role},
                     {"frozen", n.frozen},
                     {"out_shape", l.out_shape}});
  }
  return {{"format", "tsdp-topology"},
          {"version", kFormatVersion},
          {"input_shape", g.input_shape()},
          {"output_mode", std::string(to_string(g.output_mode()))},
          {"nodes", nodes}};
}

ModelGraph graph_from(const nlohmann::json& topo,
                      const std::map<std::string, Tensor>& blobs) {
  std::vector<Node> nodes;
  for (const auto& j : topo.at("nodes")) {
    Node n;
    auto& l = n.layer;
    l.name = j.at("name").get<std::string>();
    l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    n.inputs = j.at("inputs").get<std::vector<int>>();
    l.c_in = j.at("c_in");
    l.c_out = j.at("c_out");
    l.kernel = j.at("kernel");
    l.stride = j.at("stride");
    l.padding = j.at("padding");
    l.has_bias = j.at("has_bias");
    l.bn_eps = j.at("bn_eps");
    l.bn_momentum = j.at("bn_momentum");
    n.role = j.value("role", "");
    n.frozen = j.value("frozen", false);
    const std::string prefix = l.name + "/";
    for (auto it = blobs.lower_bound(prefix);
         it != blobs.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it) {
      l.params[it->first.substr(prefix.size())] = it->second;
    }
    nodes.push_back(std::move(n));
  }
  return ModelGraph(topo.at("input_shape").get<Shape>(), std::move(nodes),
                    output_mode_from_string(topo.at("output_mode").get<std::string>()));
}

void save_model(const ModelGraph& g, const std::filesystem::path& path,
                const nlohmann::json& extension) {
  Container c;
  c.kind = ContainerKind::Model;
  for (const auto& n : g.nodes()) {
    for (const auto& [name, t] : n.layer.params) c.blobs[n.layer.name + "/" + name] = t;
  }
  const auto topo = topology_json(g);
  c.chunks["topology"] = topo.dump();
  if (!extension.is_null()) c.chunks["slices"] = extension.dump();
  write_file(path, encode(c));
  write_file(path.string() + ".json", topo.dump(2) + "\n");
}

ModelGraph load_model(const std::filesystem::path& path, nlohmann::json* extension) {
  const Container c = decode(read_file(path));
  if (c.kind != ContainerKind::Model) throw FormatError(path.string() + " is not a model container");
  nlohmann::json topo;
  const std::filesystem::path sidecar = path.string() + ".json";
  if (std::filesystem::exists(sidecar)) {
    topo = nlohmann::json::parse(read_file(sidecar));
  } else {
    topo = nlohmann::json::parse(c.chunks.at("topology"));
  }
  if (extension) {
    auto it = c.chunks.find("slices");
    *extension = it == c.chunks.end() ? nlohmann::json() : nlohmann::json::parse(it->second);
  }
  return graph_from(topo, c.blobs);
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  d.validate();
  Container c;
  c.kind = ContainerKind::Dataset;
  c.blobs["images"] = d.images;
  Tensor labels({d.labels.size()});
  for (std::size_t i = 0; i < d.labels.size(); ++i) labels[i] = d.labels[i];
  c.blobs["labels"] = std::move(labels);
  c.chunks["meta"] = nlohmann::json{{"n_classes", d.n_classes},
                                    {"seed", d.seed},
                                    {"distribution", d.distribution}}
                         .dump();
  write_file(path, encode(c));
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Container c = decode(read_file(path));
  if (c.kind != ContainerKind::Dataset) throw FormatError(path.string() + " is not a dataset container");
  Dataset d;
  d.images = c.blobs.at("images");
  for (double v : c.blobs.at("labels").vec()) d.labels.push_back(static_cast<int>(v));
  const auto meta = nlohmann::json::parse(c.chunks.at("meta"));
  d.n_classes = meta.at("n_classes");
  d.seed = meta.at("seed");
  d.distribution = meta.at("distribution");
  d.validate();
  return d;
}

}  // namespace tsdp::io
