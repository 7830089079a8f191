#include "sdlab/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "sdlab/version.hpp"

namespace sdlab::io {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open file: " + path.string());
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path.string());
  out << content;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, content);
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string string_hash_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash_hex(const fs::path& path) { return string_hash_hex(read_text(path)); }

// ----------------------------- domain objects -----------------------------

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < m.cols; ++c) row.push_back(m.at(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  require(j.is_array() && !j.empty(), "matrix_from_json: expected a non-empty array of rows");
  const std::size_t rows = j.size();
  const std::size_t cols = j.front().size();
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    require(j[r].is_array() && j[r].size() == cols, "matrix_from_json: ragged rows");
    for (std::size_t c = 0; c < cols; ++c) m.at(r, c) = j[r][c].get<double>();
  }
  return m;
}

json teacher_to_json(const GmTeacher& t) {
  json j;
  j["kind"] = "gm_teacher";
  j["version"] = 1;
  j["dim"] = t.dim();
  j["tau"] = t.temperature();
  json comps = json::array();
  for (const auto& c : t.components()) {
    json jc;
    jc["mean"] = c.mean;
    jc["s"] = c.s;
    jc["anchor"] = c.anchor;
    comps.push_back(std::move(jc));
  }
  j["components"] = std::move(comps);
  return j;
}

GmTeacher teacher_from_json(const json& j) {
  require(j.value("kind", "") == "gm_teacher", "teacher_from_json: not a gm_teacher document");
  const int dim = j.at("dim").get<int>();
  const double tau = j.at("tau").get<double>();
  std::vector<GmComponent> comps;
  for (const auto& jc : j.at("components")) {
    GmComponent c;
    c.mean = jc.at("mean").get<Vec>();
    c.s = jc.at("s").get<double>();
    c.anchor = jc.at("anchor").get<Vec>();
    comps.push_back(std::move(c));
  }
  return GmTeacher(dim, std::move(comps), tau);
}

GmTeacher load_teacher(const fs::path& path) { return teacher_from_json(read_json(path)); }
void save_teacher(const fs::path& path, const GmTeacher& t) { write_json(path, teacher_to_json(t)); }

std::string teacher_hash(const GmTeacher& t) { return string_hash_hex(teacher_to_json(t).dump()); }

void save_prompt(const fs::path& path, const Matrix& base) {
  json j;
  j["kind"] = "prompt";
  j["version"] = 1;
  j["embed_dim"] = base.cols;
  j["base"] = matrix_to_json(base);
  write_json(path, j);
}

Matrix load_prompt(const fs::path& path) {
  const json j = read_json(path);
  require(j.value("kind", "") == "prompt", "load_prompt: not a prompt document");
  return matrix_from_json(j.at("base"));
}

fs::path token_filename(int particle) {
  return "tokens_particle_" + std::to_string(particle) + ".json";
}

void save_tokens(const fs::path& path, const TokenFile& t) {
  json j;
  j["kind"] = "hiper_tokens";
  j["version"] = 1;
  j["particle"] = t.particle;
  j["embed_dim"] = t.tokens.cols;
  j["tokens"] = matrix_to_json(t.tokens);
  j["initial_crn_loss"] = t.initial_crn_loss;
  j["final_crn_loss"] = t.final_crn_loss;
  j["reference_label"] = t.reference_label;
  j["seed"] = t.seed;
  write_json(path, j);
}

TokenFile load_tokens(const fs::path& path) {
  const json j = read_json(path);
  require(j.value("kind", "") == "hiper_tokens", "load_tokens: not a token document");
  TokenFile t;
  t.particle = j.at("particle").get<int>();
  t.tokens = matrix_from_json(j.at("tokens"));
  t.initial_crn_loss = j.value("initial_crn_loss", 0.0);
  t.final_crn_loss = j.value("final_crn_loss", 0.0);
  t.reference_label = j.value("reference_label", -1);
  t.seed = j.value("seed", 0ull);
  return t;
}

// --------------------------- binary checkpoints ---------------------------

void write_f64_le(const fs::path& path, std::span<const double> values) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path.string());
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(b, 8);
  }
}

Vec read_f64_le(const fs::path& path) {
  const std::string raw = read_text(path);
  require(raw.size() % 8 == 0, "read_f64_le: truncated payload in " + path.string());
  Vec out(raw.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i * 8 + b])) << (8 * b);
    }
    std::memcpy(&out[i], &bits, 8);
  }
  return out;
}

void save_scene(const fs::path& base, const Scene& scene) {
  write_f64_le(base.string() + ".bin", scene.params());
  json j;
  j["kind"] = std::string(scene.kind());
  j["shape"] = scene.shape();
  j["version"] = 1;
  j["count"] = scene.params().size();
  write_json(base.string() + ".json", j);
}

std::unique_ptr<Scene> load_scene(const fs::path& base) {
  const json j = read_json(base.string() + ".json");
  auto scene = make_scene(j.at("kind").get<std::string>(),
                          j.at("shape").get<std::vector<std::size_t>>());
  const Vec params = read_f64_le(base.string() + ".bin");
  require(params.size() == scene->params().size(),
          "load_scene: payload size does not match sidecar shape");
  std::copy(params.begin(), params.end(), scene->params().begin());
  return scene;
}

void save_adam(const fs::path& base, const AdamState& st) {
  Vec payload;
  payload.reserve(st.first_moment.size() * 2);
  payload.insert(payload.end(), st.first_moment.begin(), st.first_moment.end());
  payload.insert(payload.end(), st.second_moment.begin(), st.second_moment.end());
  write_f64_le(base.string() + ".bin", payload);
  json j;
  j["kind"] = "adam";
  j["n"] = st.first_moment.size();
  j["step_count"] = st.step_count;
  j["lr"] = st.lr;
  j["beta1"] = st.beta1;
  j["beta2"] = st.beta2;
  j["epsilon"] = st.epsilon;
  write_json(base.string() + ".json", j);
}

AdamState load_adam(const fs::path& base) {
  const json j = read_json(base.string() + ".json");
  const std::size_t n = j.at("n").get<std::size_t>();
  AdamState st(n, j.at("lr").get<double>());
  st.step_count = j.at("step_count").get<std::int64_t>();
  st.beta1 = j.at("beta1").get<double>();
  st.beta2 = j.at("beta2").get<double>();
  st.epsilon = j.at("epsilon").get<double>();
  const Vec payload = read_f64_le(base.string() + ".bin");
  require(payload.size() == 2 * n, "load_adam: payload size mismatch");
  std::copy(payload.begin(), payload.begin() + n, st.first_moment.begin());
  std::copy(payload.begin() + n, payload.end(), st.second_moment.begin());
  return st;
}

// ------------------------------- images -----------------------------------

void write_ppm(const fs::path& path, const Vec& pixels, int width, int height, int channels) {
  require(channels == 1 || channels == 3, "write_ppm: channels must be 1 or 3");
  require(pixels.size() == static_cast<std::size_t>(width) * height * channels,
          "write_ppm: pixel count mismatch");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  for (int i = 0; i < width * height; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      const double v = pixels[static_cast<std::size_t>(i) * channels + (channels == 3 ? ch : 0)];
      const int byte = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      out.put(static_cast<char>(byte));
    }
  }
}

PpmImage read_ppm(const fs::path& path) {
  const std::string raw = read_text(path);
  PpmImage img;
  int maxval = 0;
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < raw.size() && std::isspace(static_cast<unsigned char>(raw[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < raw.size() && !std::isspace(static_cast<unsigned char>(raw[pos]))) ++pos;
    return raw.substr(start, pos - start);
  };
  require(next_token() == "P6", "read_ppm: not a P6 file");
  img.width = std::stoi(next_token());
  img.height = std::stoi(next_token());
  maxval = std::stoi(next_token());
  require(maxval == 255, "read_ppm: only 8-bit supported");
  ++pos;  // single whitespace after maxval
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height * 3;
  require(raw.size() - pos >= need, "read_ppm: truncated payload");
  img.pixels.resize(need);
  for (std::size_t i = 0; i < need; ++i) {
    img.pixels[i] = static_cast<unsigned char>(raw[pos + i]) / 255.0;
  }
  return img;
}

Vec contact_sheet(const std::vector<Vec>& tiles, int rows, int cols, int tile_w, int tile_h,
                  int channels, int& out_w, int& out_h) {
  require(static_cast<int>(tiles.size()) >= rows * cols, "contact_sheet: not enough tiles");
  const int pad = 1;
  out_w = cols * (tile_w + pad) + pad;
  out_h = rows * (tile_h + pad) + pad;
  Vec sheet(static_cast<std::size_t>(out_w) * out_h * channels, 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Vec& tile = tiles[static_cast<std::size_t>(r) * cols + c];
      require(tile.size() == static_cast<std::size_t>(tile_w) * tile_h * channels,
              "contact_sheet: tile size mismatch");
      const int oy = pad + r * (tile_h + pad);
      const int ox = pad + c * (tile_w + pad);
      for (int y = 0; y < tile_h; ++y) {
        for (int x = 0; x < tile_w; ++x) {
          for (int ch = 0; ch < channels; ++ch) {
            sheet[((static_cast<std::size_t>(oy + y) * out_w) + (ox + x)) * channels + ch] =
                tile[(static_cast<std::size_t>(y) * tile_w + x) * channels + ch];
          }
        }
      }
    }
  }
  return sheet;
}

// ------------------------------- metrics ----------------------------------

void append_metrics_csv(const fs::path& path, const MetricsRow& row) {
  const bool fresh = !fs::exists(path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write file: " + path.string());
  if (fresh) out << "iter,method,iq,iv,cosine_sim,V,extractor_id,seed\n";
  char buf[3 * 32];
  std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", row.iq, row.iv, row.cosine_sim);
  out << row.iter << "," << row.method << "," << buf << "," << row.views << ","
      << row.extractor_id << "," << row.seed << "\n";
}

DirLock::DirLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::ofstream probe(path_, std::ios::out | std::ios::binary | std::ios::app);
  // Exclusive create: fail if present already.
  if (fs::exists(path_) && fs::file_size(path_) > 0) {
    throw std::invalid_argument("run directory is locked: " + path_.string());
  }
  probe << "locked\n";
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc;
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace sdlab::io
