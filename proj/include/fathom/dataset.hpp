#pragma once

// On-disk dataset format. One directory per recording:
//   config.txt        flat "key = value" text (scene, sensor models, extrinsics)
//   imu.bin           raw little-endian doubles, 7 per record (t, gyro, accel)
//   camera.bin        per frame: t, raster path, observation list
//   sonar.bin         per scan: t, point count, xyz doubles
//   images/*.ppm      binary P6 rasters of the left camera
//   groundtruth.tum   "t x y z qx qy qz qw" body poses T_WI
//   landmarks.csv     ground-truth landmark positions and colours
//   index.csv         stream -> file, record count (consistency check on read)
// Numeric fields round-trip bit-exactly: binary streams verbatim, text doubles
// printed with %.17g.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fathom/sensors.hpp"

namespace fathom {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Flat key=value configuration

class Config {
 public:
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }
  void set_double(const std::string& key, double v) { set(key, format_double(v)); }
  void set_int(const std::string& key, long long v) { set(key, std::to_string(v)); }
  void set_vec3(const std::string& key, const Vec3& v) {
    set(key, format_double(v.x()) + " " + format_double(v.y()) + " " + format_double(v.z()));
  }
  void set_pose(const std::string& key, const Pose& p) {
    std::string s;
    for (double v : {p.q.w(), p.q.x(), p.q.y(), p.q.z(), p.t.x(), p.t.y(), p.t.z()})
      s += format_double(v) + " ";
    s.pop_back();
    set(key, s);
  }

  std::string get_str(const std::string& key, const std::string& dflt = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }
  double get_double(const std::string& key, double dflt = 0.0) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : std::stod(it->second);
  }
  long long get_int(const std::string& key, long long dflt = 0) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : std::stoll(it->second);
  }
  Vec3 get_vec3(const std::string& key, const Vec3& dflt = Vec3::Zero()) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    std::istringstream ss(it->second);
    Vec3 v;
    ss >> v.x() >> v.y() >> v.z();
    if (!ss) throw std::runtime_error("config: bad vec3 in key " + key);
    return v;
  }
  Pose get_pose(const std::string& key, const Pose& dflt = Pose()) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    std::istringstream ss(it->second);
    double w, x, y, z;
    Vec3 t;
    ss >> w >> x >> y >> z >> t.x() >> t.y() >> t.z();
    if (!ss) throw std::runtime_error("config: bad pose in key " + key);
    return Pose(Quat(w, x, y, z), t);
  }

  std::string serialize() const {
    std::string out;
    for (const std::string& k : order_) out += k + " = " + values_.at(k) + "\n";
    return out;
  }

  static Config parse(const std::string& text) {
    Config c;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const size_t a = s.find_first_not_of(" \t\r");
        const size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
      if (!key.empty()) c.set(key, val);
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("config: cannot write " + path);
    f << serialize();
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// Low-level binary helpers (little-endian hosts; x86-64 throughout)

inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u8(std::ostream& os, std::uint8_t v) { os.write(reinterpret_cast<const char*>(&v), 1); }

inline double get_f64(std::istream& is) {
  double v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint8_t get_u8(std::istream& is) {
  std::uint8_t v;
  is.read(reinterpret_cast<char*>(&v), 1);
  return v;
}

// ---------------------------------------------------------------------------
// PPM (binary P6)

inline void write_ppm(const std::string& path, const ImageRaster& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ppm: cannot write " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (const Rgb8& p : img.pix) f.write(reinterpret_cast<const char*>(p.data()), 3);
}

inline ImageRaster read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("ppm: cannot open " + path);
  std::string magic;
  int w, h, maxval;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw std::runtime_error("ppm: unsupported header in " + path);
  f.get();  // single whitespace after maxval
  ImageRaster img;
  img.width = w;
  img.height = h;
  img.pix.resize(static_cast<size_t>(w) * h);
  for (Rgb8& p : img.pix) f.read(reinterpret_cast<char*>(p.data()), 3);
  if (!f) throw std::runtime_error("ppm: truncated pixel data in " + path);
  return img;
}

// ---------------------------------------------------------------------------
// TUM trajectory text ("t x y z qx qy qz qw")

inline void write_tum(const std::string& path, const std::vector<std::pair<double, Pose>>& traj) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tum: cannot write " + path);
  for (const auto& [t, p] : traj) {
    f << format_double(t);
    for (double v : {p.t.x(), p.t.y(), p.t.z(), p.q.x(), p.q.y(), p.q.z(), p.q.w()})
      f << " " << format_double(v);
    f << "\n";
  }
}

inline std::vector<std::pair<double, Pose>> read_tum(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("tum: cannot open " + path);
  std::vector<std::pair<double, Pose>> traj;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double t, x, y, z, qx, qy, qz, qw;
    if (!(ss >> t >> x >> y >> z >> qx >> qy >> qz >> qw))
      throw std::runtime_error("tum: malformed line in " + path);
    traj.emplace_back(t, Pose(Quat(qw, qx, qy, qz), Vec3(x, y, z)));
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
  std::string dir;
  Config config;
  std::vector<ImuSample> imu;
  std::vector<CameraFrame> frames;  // rasters are loaded on demand
  std::vector<SonarScan> scans;
  std::vector<std::pair<double, Pose>> groundtruth;  // T_WI
  std::vector<WorldLandmark> gt_landmarks;

  Pose T_IC() const { return config.get_pose("extrinsic_t_ic"); }
  Pose T_CSo_true() const { return config.get_pose("extrinsic_t_cso_true"); }

  CameraIntrinsics intrinsics() const {
    CameraIntrinsics c;
    c.fx = config.get_double("cam_fx", c.fx);
    c.fy = config.get_double("cam_fy", c.fy);
    c.cx = config.get_double("cam_cx", c.cx);
    c.cy = config.get_double("cam_cy", c.cy);
    c.width = static_cast<int>(config.get_int("cam_width", c.width));
    c.height = static_cast<int>(config.get_int("cam_height", c.height));
    c.baseline = config.get_double("cam_baseline", c.baseline);
    c.sigma_px = config.get_double("cam_sigma_px", 0.0);
    return c;
  }

  SonarModel sonar_model() const {
    SonarModel m;
    m.max_range = config.get_double("sonar_max_range", m.max_range);
    m.hfov_deg = config.get_double("sonar_hfov_deg", m.hfov_deg);
    m.vfov_deg = config.get_double("sonar_vfov_deg", m.vfov_deg);
    m.sigma_r = config.get_double("sonar_sigma_r", 0.0);
    m.sigma_theta = config.get_double("sonar_sigma_theta", 0.0);
    m.detect_prob = config.get_double("sonar_detect_prob", 1.0);
    m.grazing_dropout = config.get_double("sonar_grazing_dropout", 0.0);
    return m;
  }

  ImageRaster load_raster(const CameraFrame& frame) const {
    if (frame.raster_file.empty()) throw std::runtime_error("dataset: frame has no raster");
    return read_ppm(dir + "/" + frame.raster_file);
  }
};

// Serializes the world's patch list so readers can rebuild the exact scene.
inline void world_to_config(const World& world, Config* cfg) {
  cfg->set_int("world_patch_count", static_cast<long long>(world.patches.size()));
  cfg->set_double("world_sample_spacing", world.sample_spacing);
  cfg->set_int("world_landmark_stride", world.landmark_stride);
  for (size_t i = 0; i < world.patches.size(); ++i) {
    const SurfacePatch& p = world.patches[i];
    const std::string k = "world_patch" + std::to_string(i) + "_";
    cfg->set_vec3(k + "origin", p.origin);
    cfg->set_vec3(k + "edge_u", p.edge_u);
    cfg->set_vec3(k + "edge_v", p.edge_v);
    cfg->set(k + "texture", p.texture == TextureKind::kChecker ? "checker" : "gradient");
    cfg->set_double(k + "cell", p.checker_cell);
    cfg->set_vec3(k + "color_a", p.color_a.cast<double>());
    cfg->set_vec3(k + "color_b", p.color_b.cast<double>());
  }
}

inline World world_from_config(const Config& cfg) {
  World w;
  w.sample_spacing = cfg.get_double("world_sample_spacing", w.sample_spacing);
  w.landmark_stride = static_cast<int>(cfg.get_int("world_landmark_stride", w.landmark_stride));
  const long long n = cfg.get_int("world_patch_count", 0);
  for (long long i = 0; i < n; ++i) {
    const std::string k = "world_patch" + std::to_string(i) + "_";
    SurfacePatch p;
    p.origin = cfg.get_vec3(k + "origin");
    p.edge_u = cfg.get_vec3(k + "edge_u");
    p.edge_v = cfg.get_vec3(k + "edge_v");
    p.texture = cfg.get_str(k + "texture") == "gradient" ? TextureKind::kGradient : TextureKind::kChecker;
    p.checker_cell = cfg.get_double(k + "cell", p.checker_cell);
    const Vec3 ca = cfg.get_vec3(k + "color_a"), cb = cfg.get_vec3(k + "color_b");
    for (int j = 0; j < 3; ++j) {
      p.color_a[j] = static_cast<std::uint8_t>(ca[j]);
      p.color_b[j] = static_cast<std::uint8_t>(cb[j]);
    }
    w.patches.push_back(p);
  }
  w.build();
  return w;
}

// Streams a dataset to disk while it is being generated, so rasters never have
// to be held in memory all at once.
class DatasetWriter {
 public:
  DatasetWriter(std::string dir, const Config& config) : dir_(std::move(dir)) {
    namespace fs = std::filesystem;
    fs::create_directories(dir_);
    fs::create_directories(dir_ + "/images");
    config.save(dir_ + "/config.txt");
    imu_.open(dir_ + "/imu.bin", std::ios::binary);
    cam_.open(dir_ + "/camera.bin", std::ios::binary);
    sonar_.open(dir_ + "/sonar.bin", std::ios::binary);
    if (!imu_ || !cam_ || !sonar_) throw std::runtime_error("dataset: cannot create streams in " + dir_);
  }

  void add_imu(const ImuSample& s) {
    put_f64(imu_, s.t);
    for (int i = 0; i < 3; ++i) put_f64(imu_, s.gyro[i]);
    for (int i = 0; i < 3; ++i) put_f64(imu_, s.accel[i]);
    ++n_imu_;
  }

  // Writes the frame's observations; if the frame carries a raster it is saved
  // as images/left_NNNNNN.ppm and referenced from the record.
  void add_camera(const CameraFrame& frame) {
    std::string raster_file;
    if (!frame.raster.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "images/left_%06zu.ppm", n_cam_);
      raster_file = name;
      write_ppm(dir_ + "/" + raster_file, frame.raster);
    }
    put_f64(cam_, frame.t);
    put_u32(cam_, static_cast<std::uint32_t>(raster_file.size()));
    cam_.write(raster_file.data(), static_cast<std::streamsize>(raster_file.size()));
    put_u32(cam_, static_cast<std::uint32_t>(frame.obs.size()));
    for (const VisualObs& o : frame.obs) {
      put_u8(cam_, o.cam);
      put_u32(cam_, o.id);
      put_f64(cam_, o.px.x());
      put_f64(cam_, o.px.y());
    }
    ++n_cam_;
  }

  void add_sonar(const SonarScan& scan) {
    put_f64(sonar_, scan.t);
    put_u32(sonar_, static_cast<std::uint32_t>(scan.points.size()));
    for (const Vec3& p : scan.points)
      for (int i = 0; i < 3; ++i) put_f64(sonar_, p[i]);
    ++n_sonar_;
  }

  void add_groundtruth(double t, const Pose& p) { gt_.emplace_back(t, p); }

  void set_landmarks(const std::vector<WorldLandmark>& lms) { landmarks_ = lms; }

  void finalize() {
    imu_.close();
    cam_.close();
    sonar_.close();
    write_tum(dir_ + "/groundtruth.tum", gt_);
    {
      std::ofstream f(dir_ + "/landmarks.csv", std::ios::binary);
      f << "id,x,y,z,r,g,b\n";
      for (const WorldLandmark& lm : landmarks_)
        f << lm.id << "," << format_double(lm.p.x()) << "," << format_double(lm.p.y()) << ","
          << format_double(lm.p.z()) << "," << int(lm.color[0]) << "," << int(lm.color[1]) << ","
          << int(lm.color[2]) << "\n";
    }
    std::ofstream idx(dir_ + "/index.csv", std::ios::binary);
    idx << "stream,file,records\n";
    idx << "imu,imu.bin," << n_imu_ << "\n";
    idx << "camera,camera.bin," << n_cam_ << "\n";
    idx << "sonar,sonar.bin," << n_sonar_ << "\n";
    idx << "groundtruth,groundtruth.tum," << gt_.size() << "\n";
    idx << "landmarks,landmarks.csv," << landmarks_.size() << "\n";
  }

 private:
  std::string dir_;
  std::ofstream imu_, cam_, sonar_;
  size_t n_imu_ = 0, n_cam_ = 0, n_sonar_ = 0;
  std::vector<std::pair<double, Pose>> gt_;
  std::vector<WorldLandmark> landmarks_;
};

inline Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  auto need = [&](const std::string& stream, const std::string& file) {
    if (!fs::exists(dir + "/" + file))
      throw std::runtime_error("dataset: missing stream '" + stream + "' (" + file + ")");
  };
  need("config", "config.txt");
  need("index", "index.csv");

  Dataset ds;
  ds.dir = dir;
  ds.config = Config::load(dir + "/config.txt");

  std::map<std::string, std::pair<std::string, size_t>> index;
  {
    std::ifstream f(dir + "/index.csv");
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const size_t c1 = line.find(','), c2 = line.find(',', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw std::runtime_error("dataset: malformed index.csv line: " + line);
      index[line.substr(0, c1)] = {line.substr(c1 + 1, c2 - c1 - 1),
                                   static_cast<size_t>(std::stoull(line.substr(c2 + 1)))};
    }
  }
  auto entry = [&](const std::string& stream) {
    auto it = index.find(stream);
    if (it == index.end()) throw std::runtime_error("dataset: stream '" + stream + "' not in index");
    need(stream, it->second.first);
    return it->second;
  };

  {
    const auto [file, count] = entry("imu");
    std::ifstream f(dir + "/" + file, std::ios::binary);
    for (size_t i = 0; i < count; ++i) {
      ImuSample s;
      s.t = get_f64(f);
      for (int j = 0; j < 3; ++j) s.gyro[j] = get_f64(f);
      for (int j = 0; j < 3; ++j) s.accel[j] = get_f64(f);
      if (!f) throw std::runtime_error("dataset: stream 'imu' truncated");
      ds.imu.push_back(s);
    }
  }
  {
    const auto [file, count] = entry("camera");
    std::ifstream f(dir + "/" + file, std::ios::binary);
    for (size_t i = 0; i < count; ++i) {
      CameraFrame fr;
      fr.t = get_f64(f);
      const std::uint32_t name_len = get_u32(f);
      fr.raster_file.resize(name_len);
      f.read(fr.raster_file.data(), name_len);
      const std::uint32_t n_obs = get_u32(f);
      fr.obs.resize(n_obs);
      for (auto& o : fr.obs) {
        o.cam = get_u8(f);
        o.id = get_u32(f);
        o.px.x() = get_f64(f);
        o.px.y() = get_f64(f);
      }
      if (!f) throw std::runtime_error("dataset: stream 'camera' truncated");
      ds.frames.push_back(std::move(fr));
    }
  }
  {
    const auto [file, count] = entry("sonar");
    std::ifstream f(dir + "/" + file, std::ios::binary);
    for (size_t i = 0; i < count; ++i) {
      SonarScan s;
      s.t = get_f64(f);
      const std::uint32_t n = get_u32(f);
      s.points.resize(n);
      for (auto& p : s.points)
        for (int j = 0; j < 3; ++j) p[j] = get_f64(f);
      if (!f) throw std::runtime_error("dataset: stream 'sonar' truncated");
      ds.scans.push_back(std::move(s));
    }
  }
  {
    const auto [file, count] = entry("groundtruth");
    ds.groundtruth = read_tum(dir + "/" + file);
    if (ds.groundtruth.size() != count)
      throw std::runtime_error("dataset: stream 'groundtruth' record count mismatch");
  }
  {
    const auto [file, count] = entry("landmarks");
    std::ifstream f(dir + "/" + file);
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      WorldLandmark lm;
      int r, g, b;
      unsigned long id;
      if (std::sscanf(line.c_str(), "%lu,%lf,%lf,%lf,%d,%d,%d", &id, &lm.p.x(), &lm.p.y(),
                      &lm.p.z(), &r, &g, &b) != 7)
        throw std::runtime_error("dataset: stream 'landmarks' malformed line: " + line);
      lm.id = static_cast<std::uint32_t>(id);
      lm.color = Rgb8(static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                      static_cast<std::uint8_t>(b));
      ds.gt_landmarks.push_back(lm);
    }
    if (ds.gt_landmarks.size() != count)
      throw std::runtime_error("dataset: stream 'landmarks' record count mismatch");
  }
  return ds;
}

}  // namespace fathom
