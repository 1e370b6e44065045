#include "sspt/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "sspt/binary_io.hpp"
#include "sspt/format.hpp"

namespace sspt {

void write_metric_csv(const std::vector<MetricRecord>& log, const std::filesystem::path& file) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << "epoch,split,metric,value\n";
  for (const auto& r : log) os << r.epoch << ',' << r.split << ',' << r.metric << ',' << shortest(r.value) << '\n';
}

std::vector<MetricRecord> read_metric_csv(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  std::vector<MetricRecord> out;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    MetricRecord r;
    std::string epoch, value;
    std::getline(ss, epoch, ',');
    std::getline(ss, r.split, ',');
    std::getline(ss, r.metric, ',');
    std::getline(ss, value);
    r.epoch = static_cast<std::uint32_t>(std::stoul(epoch));
    r.value = std::stod(value);
    out.push_back(std::move(r));
  }
  return out;
}

namespace {
constexpr char kMagic[4] = {'S', 'S', 'P', 'T'};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + file.string());
  os.write(kMagic, 4);
  io::put(os, kCheckpointVersion);
  io::put_string(os, ckpt.dataset_digest);

  const auto& c = ckpt.params.config;
  for (std::size_t v : {c.input_width, c.lookback, c.d_model, c.heads, c.ffn_hidden}) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(c.activation));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(c.norm));
  io::put<std::uint8_t>(os, static_cast<std::uint8_t>(c.pooling));

  const auto& p = ckpt.params;
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    io::put_string(os, p.names[i]);
    const auto& t = p.tensors[i];
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }

  io::put<std::uint8_t>(os, ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& st = *ckpt.optimizer;
    io::put<std::uint64_t>(os, st.step);
    for (double v : {st.options.lr, st.options.beta1, st.options.beta2, st.options.eps}) io::put(os, v);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(st.param_ids.size()));
    for (std::size_t s = 0; s < st.param_ids.size(); ++s) {
      io::put<std::uint32_t>(os, static_cast<std::uint32_t>(st.param_ids[s]));
      io::put_array(os, st.m[s].storage());
      io::put_array(os, st.v[s].storage());
    }
  }

  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.log.size()));
  for (const auto& r : ckpt.log) {
    io::put(os, r.epoch);
    io::put_string(os, r.split);
    io::put_string(os, r.metric);
    io::put(os, r.value);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint not found: " + file.string());
  try {
    char magic[4];
    is.read(magic, 4);
    if (!is || !std::equal(magic, magic + 4, kMagic)) throw io::FormatError("bad magic bytes");
    const auto version = io::get<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw io::FormatError("unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.dataset_digest = io::get_string(is);
    auto& c = ck.params.config;
    for (std::size_t* f : {&c.input_width, &c.lookback, &c.d_model, &c.heads, &c.ffn_hidden}) *f = io::get<std::uint32_t>(is);
    c.activation = static_cast<model::Activation>(io::get<std::uint8_t>(is));
    c.norm = static_cast<model::NormPlacement>(io::get<std::uint8_t>(is));
    c.pooling = static_cast<model::Pooling>(io::get<std::uint8_t>(is));

    const auto count = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      auto name = io::get_string(is, 4096);
      const auto slash = name.find('/');
      if (slash == std::string::npos) throw io::FormatError("parameter name '" + name + "' lacks a group");
      const auto rank = io::get<std::uint32_t>(is);
      if (rank > 8) throw io::FormatError("rank " + std::to_string(rank) + " too large");
      ndgrad::Shape shape(rank);
      for (auto& d : shape) d = io::get<std::uint32_t>(is);
      ndgrad::Tensor<float> t(shape);
      is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
      if (!is) throw io::FormatError("truncated tensor " + name);
      ck.params.groups.push_back(name.substr(0, slash));
      ck.params.names.push_back(std::move(name));
      ck.params.tensors.push_back(std::move(t));
    }

    if (io::get<std::uint8_t>(is)) {
      ndgrad::AdamState<float> st;
      st.step = io::get<std::uint64_t>(is);
      for (double* v : {&st.options.lr, &st.options.beta1, &st.options.beta2, &st.options.eps}) *v = io::get<double>(is);
      const auto n = io::get<std::uint32_t>(is);
      for (std::uint32_t s = 0; s < n; ++s) {
        const auto id = io::get<std::uint32_t>(is);
        if (id >= ck.params.size()) throw io::FormatError("optimizer entry for unknown parameter");
        const auto& shape = ck.params.tensors[id].shape();
        st.param_ids.push_back(id);
        st.m.emplace_back(shape, io::get_array<float>(is));
        st.v.emplace_back(shape, io::get_array<float>(is));
      }
      ck.optimizer = std::move(st);
    }

    const auto nlog = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nlog; ++i) {
      MetricRecord r;
      r.epoch = io::get<std::uint32_t>(is);
      r.split = io::get_string(is);
      r.metric = io::get_string(is);
      r.value = io::get<double>(is);
      ck.log.push_back(std::move(r));
    }
    return ck;
  } catch (const io::FormatError& e) {
    throw std::runtime_error("checkpoint " + file.string() + ": " + e.what());
  } catch (const ndgrad::ShapeError& e) {
    throw std::runtime_error("checkpoint " + file.string() + ": " + e.what());
  }
}

}  // namespace sspt
