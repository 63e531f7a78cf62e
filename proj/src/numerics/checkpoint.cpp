#include "alter/numerics/checkpoint.hpp"

#include "alter/numerics/rng.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace alter {

namespace {

constexpr const char* kMagic = "ALTER-CHECKPOINT";
constexpr int kVersion = 1;

void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

const Matrix* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return &m;
    return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::ostringstream head;
    head << kMagic << ' ' << kVersion << '\n';
    for (const auto& [k, v] : ckpt.meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
            throw DataError("checkpoint meta key/value contains a separator: " + k);
        head << "meta " << k << ' ' << v << '\n';
    }
    std::size_t offset = 0;
    for (const auto& [name, m] : ckpt.tensors) {
        if (name.find_first_of(" \n") != std::string::npos) throw DataError("tensor name contains whitespace: " + name);
        head << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << ' ' << offset << '\n';
        offset += static_cast<std::size_t>(m.size()) * 8;
    }
    head << "payload " << offset << '\n';
    std::string out = head.str();
    out.reserve(out.size() + offset);
    for (const auto& [name, m] : ckpt.tensors)
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    Checkpoint ckpt;
    std::size_t pos = 0;
    auto next_line = [&]() {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw DataError("checkpoint truncated in manifest");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    {
        std::istringstream first(next_line());
        std::string magic;
        int version = 0;
        first >> magic >> version;
        if (magic != kMagic) throw DataError("not a checkpoint file (bad magic)");
        if (version != kVersion)
            throw DataError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kVersion) + ")");
    }
    struct Entry {
        std::string name;
        Index rows, cols;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    std::size_t payload = 0;
    for (;;) {
        const std::string line = next_line();
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            ckpt.meta[key] = value;
        } else if (kind == "tensor") {
            Entry e;
            if (!(ls >> e.name >> e.rows >> e.cols >> e.offset) || e.rows < 0 || e.cols < 0)
                throw DataError("malformed tensor line: " + line);
            entries.push_back(e);
        } else if (kind == "payload") {
            if (!(ls >> payload)) throw DataError("malformed payload line");
            break;
        } else {
            throw DataError("unexpected checkpoint manifest line: " + line);
        }
    }
    if (bytes.size() - pos != payload)
        throw DataError("checkpoint payload is " + std::to_string(bytes.size() - pos) + " bytes, manifest says " +
                        std::to_string(payload));
    const auto* base = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (const Entry& e : entries) {
        const std::size_t n = static_cast<std::size_t>(e.rows * e.cols);
        if (e.offset + n * 8 > payload) throw DataError("tensor " + e.name + " extends past payload");
        Matrix m(e.rows, e.cols);
        for (std::size_t i = 0; i < n; ++i) m.data()[i] = get_f64(base + e.offset + 8 * i);
        ckpt.tensors.emplace_back(e.name, std::move(m));
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write on checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_checkpoint(buf.str());
}

Checkpoint snapshot(const ParamStore& store) {
    Checkpoint c;
    for (const Parameter* p : store.all()) c.tensors.emplace_back(p->name, p->value);
    return c;
}

void restore(ParamStore& store, const Checkpoint& ckpt, bool allow_missing) {
    for (Parameter* p : store.all()) {
        const Matrix* m = ckpt.find(p->name);
        if (m == nullptr) {
            if (allow_missing) continue;
            throw DataError("checkpoint lacks parameter " + p->name);
        }
        if (m->rows() != p->rows() || m->cols() != p->cols())
            throw DataError("dimension mismatch for " + p->name + ": checkpoint " + std::to_string(m->rows()) + "x" +
                            std::to_string(m->cols()) + ", model " + std::to_string(p->rows()) + "x" +
                            std::to_string(p->cols()));
        p->value = *m;
    }
}

void append_adam_state(Checkpoint& ckpt, const AdamState& state) {
    ckpt.meta["adam.step"] = std::to_string(state.step);
    for (const auto& [name, m] : state.moments) {
        ckpt.tensors.emplace_back("adam.first/" + name, m.first);
        ckpt.tensors.emplace_back("adam.second/" + name, m.second);
    }
}

void restore_adam_state(const Checkpoint& ckpt, AdamState& state) {
    auto it = ckpt.meta.find("adam.step");
    if (it == ckpt.meta.end()) throw DataError("checkpoint holds no optimizer state");
    state.step = std::stoll(it->second);
    state.moments.clear();
    const std::string first = "adam.first/", second = "adam.second/";
    for (const auto& [name, m] : ckpt.tensors) {
        if (name.rfind(first, 0) == 0) state.moments[name.substr(first.size())].first = m;
        if (name.rfind(second, 0) == 0) state.moments[name.substr(second.size())].second = m;
    }
}

std::uint64_t parameter_digest(const std::vector<const Parameter*>& params) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (const Parameter* p : params) {
        h = splitmix64(h ^ hash_name(p->name));
        for (Index i = 0; i < p->value.size(); ++i) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(p->value.data()[i]));
    }
    return h;
}

}  // namespace alter
