#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>

namespace sample_ran {

struct rlc_config {
  bool     is_srb       = false;
  uint32_t sn_field_len = 12;
  uint32_t t_reassembly = 35;
};

struct rlc_entity {
  explicit rlc_entity(const rlc_config& cfg) : config(cfg) {}
  rlc_config config;
};

// Builds the configuration used when a signalling radio bearer is created.
rlc_config make_srb_config(uint32_t srb_id)
{
  rlc_config cfg;
  cfg.is_srb       = true;
  cfg.sn_field_len = srb_id == 0 ? 0 : 12;
  return cfg;
}

std::unique_ptr<rlc_entity> create_rlc_entity(const rlc_config& cfg)
{
  if (cfg.sn_field_len != 0 && cfg.sn_field_len != 12 && cfg.sn_field_len != 18) {
    throw std::invalid_argument("unsupported sequence number length");
  }
  return std::make_unique<rlc_entity>(cfg);
}

uint32_t parse_reassembly_timer(const std::string& text)
{
  long value = std::strtol(text.c_str(), nullptr, 10);
  return static_cast<uint32_t>(value);
}

} // namespace sample_ran
