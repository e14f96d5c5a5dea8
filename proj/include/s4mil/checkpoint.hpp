#pragma once

// Model checkpoint ("S4MC"), all integers little-endian:
//   magic "S4MC", u32 version (= 1)
//   u32 input_dim, hidden_dim, state_dim, num_classes, num_ssm_layers,
//       multitask (0/1), patch_classes, discretization (0 bilinear, 1 zoh)
//   u32 parameter count (low word), u32 parameter count (high word)
//   parameters in declaration order, each row-major, IEEE-754 binary32

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "s4mil/data_io.hpp"
#include "s4mil/error.hpp"
#include "s4mil/model.hpp"

namespace s4mil {

inline constexpr std::array<char, 4> checkpoint_magic{'S', '4', 'M', 'C'};
inline constexpr std::uint32_t checkpoint_version = 1;

template <typename Scalar>
std::vector<unsigned char> encode_checkpoint(const MilModel<Scalar>& model) {
    const auto& c = model.config();
    std::vector<unsigned char> out(checkpoint_magic.begin(), checkpoint_magic.end());
    detail::put_u32(out, checkpoint_version);
    for (std::size_t v : {c.input_dim, c.hidden_dim, c.state_dim, c.num_classes, c.num_ssm_layers})
        detail::put_u32(out, static_cast<std::uint32_t>(v));
    detail::put_u32(out, c.multitask ? 1u : 0u);
    detail::put_u32(out, static_cast<std::uint32_t>(c.patch_classes));
    detail::put_u32(out, c.discretization == Discretization::bilinear ? 0u : 1u);
    const std::uint64_t count = model.parameter_count();
    detail::put_u32(out, static_cast<std::uint32_t>(count));
    detail::put_u32(out, static_cast<std::uint32_t>(count >> 32));
    for (const auto* p : model.parameters())
        for (Eigen::Index i = 0; i < p->value.size(); ++i) detail::put_f32(out, static_cast<float>(p->value.data()[i]));
    return out;
}

template <typename Scalar = float>
MilModel<Scalar> decode_checkpoint(std::span<const unsigned char> bytes) {
    constexpr std::size_t header = 4 + 4 + 8 * 4 + 8;
    if (bytes.size() < header) throw ParseError("truncated S4MC header", bytes.size());
    if (!std::equal(checkpoint_magic.begin(), checkpoint_magic.end(), bytes.begin()))
        throw ParseError("bad magic, expected \"S4MC\"", 0);
    const auto version = detail::get_u32(bytes, 4);
    if (version != checkpoint_version) throw ParseError("unsupported S4MC version " + std::to_string(version), 4);
    ModelConfig c;
    c.input_dim = detail::get_u32(bytes, 8);
    c.hidden_dim = detail::get_u32(bytes, 12);
    c.state_dim = detail::get_u32(bytes, 16);
    c.num_classes = detail::get_u32(bytes, 20);
    c.num_ssm_layers = detail::get_u32(bytes, 24);
    const auto multitask = detail::get_u32(bytes, 28);
    if (multitask > 1) throw ParseError("multitask flag must be 0 or 1", 28);
    c.multitask = multitask == 1;
    c.patch_classes = detail::get_u32(bytes, 32);
    const auto rule = detail::get_u32(bytes, 36);
    if (rule > 1) throw ParseError("unknown discretization code " + std::to_string(rule), 36);
    c.discretization = rule == 0 ? Discretization::bilinear : Discretization::zoh;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("invalid model config: ") + e.what(), 8);
    }
    const std::uint64_t count =
        static_cast<std::uint64_t>(detail::get_u32(bytes, 40)) | (static_cast<std::uint64_t>(detail::get_u32(bytes, 44)) << 32);
    MilModel<Scalar> model(c);
    if (count != model.parameter_count())
        throw ParseError("parameter count " + std::to_string(count) + " does not match the config (" +
                             std::to_string(model.parameter_count()) + ")",
                         40);
    const std::uint64_t expected = header + 4 * count;
    if (bytes.size() < expected)
        throw ParseError("truncated S4MC payload: expected " + std::to_string(expected) + " bytes", bytes.size());
    if (bytes.size() > expected) throw ParseError("trailing bytes after S4MC payload", static_cast<std::size_t>(expected));
    std::size_t offset = header;
    for (auto* p : model.parameters())
        for (Eigen::Index i = 0; i < p->value.size(); ++i, offset += 4)
            p->value.data()[i] = static_cast<Scalar>(detail::get_f32(bytes, offset));
    return model;
}

template <typename Scalar>
void write_checkpoint(const std::filesystem::path& path, const MilModel<Scalar>& model) {
    detail::write_file(path, encode_checkpoint(model));
}

template <typename Scalar = float>
MilModel<Scalar> read_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    try {
        return decode_checkpoint<Scalar>(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

}  // namespace s4mil
