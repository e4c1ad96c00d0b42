#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "czsl/error.hpp"
#include "czsl/tokenmodel.hpp"

namespace czsl {
namespace {

constexpr char kMagic[8] = {'C', 'Z', 'S', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw LoadError("checkpoint truncated in preamble");
  return value;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

// Row-major payload of an Eigen (column-major) matrix.
std::vector<double> row_major(const Eigen::MatrixXd& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.data(), m.rows(), m.cols()) = m;
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Eigen::MatrixXd>> named_arrays(const Detector& detector,
                                                                  const CompositionSpace& space) {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays{
      {"tokens/attributes", detector.tokens.attributes()},
      {"tokens/objects", detector.tokens.objects()},
      {"base/attributes", detector.tokens.attribute_base()},
      {"base/objects", detector.tokens.object_base()},
  };
  for (const auto& p : detector.prompts) {
    arrays.emplace_back("prompts/" + space.name(p.owner), p.tokens);
  }
  return arrays;
}

void save_checkpoint(const Detector& detector, const CompositionSpace& space,
                     const std::string& path, std::uint64_t manifest_hash,
                     const std::map<std::string, std::string>& tags) {
  const auto arrays = named_arrays(detector, space);
  nlohmann::json header;
  header["format"] = "czsl-checkpoint";
  header["version"] = kVersion;
  header["dim"] = detector.frozen.dim;
  header["frozen"] = {{"model_seed", detector.frozen.seed}, {"tau", detector.frozen.tau}};
  header["manifest_hash"] = hex64(manifest_hash);
  header["tags"] = tags;
  std::vector<std::string> attributes, objects;
  for (const auto& a : space.attributes()) attributes.push_back(a.name);
  for (const auto& o : space.objects()) objects.push_back(o.name);
  header["space"] = {{"attributes", attributes}, {"objects", objects}};

  std::uint64_t offset = 0;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, m] : arrays) {
    entries.push_back({{"name", name},
                       {"shape", {m.rows(), m.cols()}},
                       {"dtype", "f64"},
                       {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  header["arrays"] = entries;
  nlohmann::json prompts = nlohmann::json::array();
  for (const auto& p : detector.prompts) {
    prompts.push_back({{"owner", space.name(p.owner)}, {"init_text", p.init_text}});
  }
  header["prompts"] = prompts;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(out, kVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : arrays) {
    const auto data = row_major(m);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw IoError("short write to checkpoint '" + path + "'");
}

Detector load_checkpoint(const std::string& path, const CompositionSpace& space) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw LoadError("'" + path + "' is not a czsl checkpoint");
  }
  if (read_le<std::uint32_t>(in) != kVersion) throw LoadError("unsupported checkpoint version");
  const auto header_size = read_le<std::uint64_t>(in);
  if (header_size > (1u << 26)) throw LoadError("checkpoint header too large");
  std::string text(header_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw LoadError("checkpoint truncated in header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  const std::streampos payload_start = in.tellg();
  try {
    const int dim = header.at("dim");
    const auto attributes = header.at("space").at("attributes").get<std::vector<std::string>>();
    const auto objects = header.at("space").at("objects").get<std::vector<std::string>>();
    if (static_cast<int>(attributes.size()) != space.num_attributes() ||
        static_cast<int>(objects.size()) != space.num_objects()) {
      throw ShapeError("checkpoint holds " + std::to_string(attributes.size()) + "x" +
                       std::to_string(objects.size()) + " primitives, expected " +
                       std::to_string(space.num_attributes()) + "x" +
                       std::to_string(space.num_objects()));
    }
    if (!(CompositionSpace::build(attributes, objects) == space)) {
      throw ShapeError("checkpoint primitive names differ from the manifest");
    }

    std::map<std::string, Eigen::MatrixXd> arrays;
    for (const auto& entry : header.at("arrays")) {
      const std::string name = entry.at("name");
      const Eigen::Index rows = entry.at("shape")[0];
      const Eigen::Index cols = entry.at("shape")[1];
      if (entry.at("dtype") != "f64") throw LoadError("unsupported dtype in '" + name + "'");
      const std::uint64_t offset = entry.at("offset");
      std::vector<double> data(static_cast<std::size_t>(rows * cols));
      in.seekg(payload_start + static_cast<std::streamoff>(offset));
      in.read(reinterpret_cast<char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
      if (!in) throw LoadError("checkpoint truncated in array '" + name + "'");
      arrays[name] = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          data.data(), rows, cols);
    }
    auto take = [&](const std::string& name, Eigen::Index rows) {
      const auto it = arrays.find(name);
      if (it == arrays.end()) throw LoadError("checkpoint lacks array '" + name + "'");
      if (it->second.rows() != rows || it->second.cols() != dim) {
        throw ShapeError("array '" + name + "' has the wrong shape");
      }
      return it->second;
    };

    Detector detector;
    detector.frozen = FrozenModel::create(dim, header.at("frozen").at("model_seed"));
    detector.tokens = TokenTable::restore(take("tokens/attributes", space.num_attributes()),
                                          take("tokens/objects", space.num_objects()),
                                          take("base/attributes", space.num_attributes()),
                                          take("base/objects", space.num_objects()));
    for (const auto& p : header.at("prompts")) {
      PromptSlot slot;
      slot.owner = space.parse(p.at("owner").get<std::string>());
      slot.init_text = p.at("init_text");
      const auto it = arrays.find("prompts/" + space.name(slot.owner));
      if (it == arrays.end()) throw LoadError("checkpoint lacks prompt array");
      if (it->second.cols() != dim) throw ShapeError("prompt array has the wrong width");
      slot.tokens = it->second;
      detector.prompts.push_back(std::move(slot));
    }
    return detector;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ValidationError& e) {
    throw LoadError(std::string("invalid checkpoint contents: ") + e.what());
  }
}

}  // namespace czsl
