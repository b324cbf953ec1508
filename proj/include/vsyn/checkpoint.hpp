#pragma once

// Checkpoint archive: magic "IDU1", then back-to-back records until EOF.
// record := u32le name length | name bytes | 4 x i64le extents (b,c,h,w)
//         | numel x f32le payload
// Model parameters come first, optimizer state follows in the same format
// ("<name>#m", "<name>#v", "<name>#snu"), then bookkeeping records
// ("meta#step", "meta#config" with the config text packed one byte per float).

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vsyn/common.hpp"

namespace vsyn {

struct CheckpointRecord {
    std::string name;
    Shape4 shape;
    std::vector<float> data;
};

class CheckpointWriter {
  public:
    explicit CheckpointWriter(const std::string& path) : f_(path, std::ios::binary) {
        require(static_cast<bool>(f_), "cannot open checkpoint for writing: " + path);
        f_.write("IDU1", 4);
    }

    void add(const std::string& name, Shape4 shape, const float* data) {
        const uint32_t len = static_cast<uint32_t>(name.size());
        write_raw(&len, 4);
        f_.write(name.data(), len);
        int64_t ext[4] = {shape.b, shape.c, shape.h, shape.w};
        write_raw(ext, 32);
        write_raw(data, sizeof(float) * static_cast<size_t>(shape.numel()));
    }

    void add_vector(const std::string& name, const std::vector<float>& v) {
        add(name, Shape4{1, 1, 1, static_cast<int64_t>(v.size())}, v.data());
    }

    void add_text(const std::string& name, const std::string& text) {
        std::vector<float> packed(text.size());
        for (size_t i = 0; i < text.size(); i++)
            packed[i] = static_cast<float>(static_cast<unsigned char>(text[i]));
        add_vector(name, packed);
    }

  private:
    void write_raw(const void* p, size_t n) { f_.write(static_cast<const char*>(p), n); }
    std::ofstream f_;
};

class CheckpointArchive {
  public:
    explicit CheckpointArchive(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        require(static_cast<bool>(f), "cannot open checkpoint: " + path);
        char magic[4];
        f.read(magic, 4);
        require(f.gcount() == 4 && std::memcmp(magic, "IDU1", 4) == 0,
                "not a checkpoint archive (bad magic): " + path);
        while (true) {
            uint32_t len = 0;
            f.read(reinterpret_cast<char*>(&len), 4);
            if (f.gcount() == 0) break;
            require(f.gcount() == 4, "truncated checkpoint record header: " + path);
            CheckpointRecord rec;
            rec.name.resize(len);
            f.read(rec.name.data(), len);
            int64_t ext[4];
            f.read(reinterpret_cast<char*>(ext), 32);
            rec.shape = {ext[0], ext[1], ext[2], ext[3]};
            rec.data.resize(static_cast<size_t>(rec.shape.numel()));
            f.read(reinterpret_cast<char*>(rec.data.data()),
                   sizeof(float) * rec.data.size());
            require(static_cast<bool>(f), "truncated checkpoint payload for '" + rec.name + "'");
            order_.push_back(rec.name);
            records_[rec.name] = std::move(rec);
        }
    }

    bool has(const std::string& name) const { return records_.count(name) > 0; }

    const CheckpointRecord& at(const std::string& name) const {
        auto it = records_.find(name);
        require(it != records_.end(), "checkpoint is missing record '" + name + "'");
        return it->second;
    }

    std::string text(const std::string& name) const {
        const auto& rec = at(name);
        std::string s(rec.data.size(), '\0');
        for (size_t i = 0; i < rec.data.size(); i++)
            s[i] = static_cast<char>(static_cast<unsigned char>(rec.data[i]));
        return s;
    }

    const std::vector<std::string>& names() const { return order_; }

  private:
    std::vector<std::string> order_;
    std::map<std::string, CheckpointRecord> records_;
};

}  // namespace vsyn
