#include "acebert/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "acebert/errors.hpp"

namespace acebert {

namespace {

using Blobs = std::vector<std::pair<std::string, Tensor>>;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

void write_section(std::ostream& out, const char tag[4], const Blobs& blobs) {
  out.write(tag, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, t] : blobs) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    const auto data = t.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  }
}

Blobs read_section(std::istream& in) {
  const auto count = get<std::uint32_t>(in, "blob count");
  Blobs blobs;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, "name length");
    if (len > 4096) throw FormatError("checkpoint: implausible name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in, "rank");
    if (rank > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint64_t>(in, "dimension"));
    const auto n = shape_numel(shape);
    if (n > (std::size_t{1} << 32)) throw FormatError("checkpoint: implausible size for '" + name + "'");
    std::vector<float> data(n);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw FormatError("checkpoint: truncated data for '" + name + "'");
    blobs.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return blobs;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config, const ModelParams<float>& params,
                     const vision::PatchFeatureExtractor* extractor) {
  config.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write("ACKP", 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    for (int v : {config.layers, config.hidden_dim, config.heads, config.ff_dim, config.vocab_size,
                  config.max_positions, config.segment_vocab, config.retrieval_dim, config.patch_dim,
                  config.pixel_dim, config.disc_hidden}) {
      put<std::int32_t>(out, v);
    }
    put<double>(out, config.dropout);
    put<std::uint32_t>(out, extractor ? 2 : 1);
    write_section(out, "PARM", params.named());
    if (extractor) write_section(out, "XTRC", extractor->named_weights());
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "ACKP", 4) != 0) throw FormatError("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ck;
  auto& c = ck.config;
  for (int* field : {&c.layers, &c.hidden_dim, &c.heads, &c.ff_dim, &c.vocab_size, &c.max_positions,
                     &c.segment_vocab, &c.retrieval_dim, &c.patch_dim, &c.pixel_dim, &c.disc_hidden}) {
    *field = get<std::int32_t>(in, "config");
  }
  c.dropout = get<double>(in, "config");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: stored config invalid: ") + e.what());
  }
  const auto sections = get<std::uint32_t>(in, "section count");
  bool have_params = false;
  for (std::uint32_t s = 0; s < sections; ++s) {
    char tag[4];
    in.read(tag, 4);
    if (!in) throw FormatError("checkpoint: truncated section header");
    auto blobs = read_section(in);
    if (std::memcmp(tag, "PARM", 4) == 0) {
      ck.params = ModelParams<float>::from_named(c, blobs);
      have_params = true;
    } else if (std::memcmp(tag, "XTRC", 4) == 0) {
      ck.extractor = vision::PatchFeatureExtractor::from_named_weights(blobs);
    } else {
      throw FormatError("checkpoint: unknown section tag '" + std::string(tag, 4) + "'");
    }
  }
  if (!have_params) throw FormatError("checkpoint: no parameter section");
  return ck;
}

}  // namespace acebert
